"""Outer training loop and checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional

import numpy as np

from ..highway import HighwayEnv, SimConfig
from ..rollout import policy_chooser, run_episode
from .nets import MlpNet
from .ppo import NonFiniteLossError, RolloutMemory, TrainConfig, TrainerState, ppo_update

CHECKPOINT_FORMAT = "highway_shield.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class CurveRow:
    episode: int
    efficiency_return: float
    collisions: int
    mean_lambda: float
    mean_flow: float
    intervention_rate: float
    epsilon: float


CURVE_FIELDS = [f for f in CurveRow.__dataclass_fields__]


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, state: TrainerState, curves: List[CurveRow]):
        super().__init__(message)
        self.state = state
        self.curves = curves


def episode_seed(seed: int, episode: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stream, episode]).generate_state(1)[0])


def train(
    sim_cfg: SimConfig,
    cfg: TrainConfig,
    seed: int,
    on_episode: Optional[Callable[[CurveRow], None]] = None,
) -> tuple:
    """Roll out and update for ``cfg.n_episodes``; returns ``(state, curves)``.

    Raises ``TrainingAborted`` (carrying the last good state) on a NaN.
    """
    env = HighwayEnv(sim_cfg)
    n_agents = sim_cfg.scenario.n_agents
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 100]))
    update_rng = np.random.default_rng(np.random.SeedSequence([seed, 200]))
    state = TrainerState.create(env.obs_dim, n_agents * (env.obs_dim + 1), env.n_actions, n_agents, cfg, init_rng)
    curves: List[CurveRow] = []
    for ep in range(cfg.n_episodes):
        eps = cfg.epsilon(ep)
        memories = [RolloutMemory() for _ in range(n_agents)]
        chooser = policy_chooser(env, state.policy_net, [a.theta for a in state.agents], eps)
        result = run_episode(env, chooser, episode_seed(seed, ep), cfg.discount_gamma, memories)
        try:
            ppo_update(memories, state, cfg, update_rng)
        except NonFiniteLossError as exc:
            raise TrainingAborted(str(exc), state, curves) from exc
        m = result.metrics
        row = CurveRow(
            episode=ep,
            efficiency_return=m.efficiency_return,
            collisions=m.collisions,
            mean_lambda=float(np.mean([a.lam for a in state.agents])),
            mean_flow=m.mean_flow,
            intervention_rate=m.intervention_rate,
            epsilon=eps,
        )
        curves.append(row)
        if on_episode is not None:
            on_episode(row)
    return state, curves


def checkpoint_dict(state: TrainerState, meta: dict) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "epoch": state.epoch,
        "sizes": {
            "policy": list(state.policy_net.sizes),
            "critic": list(state.critic_net.sizes),
            "worst_q": list(state.q_net.sizes),
        },
        "agents": [
            {
                "theta": a.theta.tolist(),
                "phi": a.phi.tolist(),
                "omega": a.omega.tolist(),
                "lambda": a.lam,
            }
            for a in state.agents
        ],
    }


def save_checkpoint(path: str, state: TrainerState, meta: dict) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(state, meta), fh, sort_keys=True)


class CheckpointError(ValueError):
    pass


@dataclass
class LoadedPolicy:
    net: MlpNet
    thetas: List[np.ndarray]
    lambdas: List[float]
    meta: dict


def load_checkpoint(path: str) -> LoadedPolicy:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version {CHECKPOINT_VERSION} checkpoint")
    net = MlpNet(data["sizes"]["policy"])
    thetas = [np.asarray(a["theta"], dtype=float) for a in data["agents"]]
    for theta in thetas:
        if theta.shape != (net.n_params,):
            raise CheckpointError("policy parameter count does not match its layer sizes")
    return LoadedPolicy(net, thetas, [float(a["lambda"]) for a in data["agents"]], data["meta"])


def curves_as_dicts(curves: List[CurveRow]) -> List[dict]:
    return [asdict(c) for c in curves]
