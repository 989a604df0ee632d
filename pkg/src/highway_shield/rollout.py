"""Episode runner shared by training, evaluation and scripted baselines."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .controllers import MAINTAIN
from .highway import DecisionContext, HighwayEnv, Metrics, episode_metrics
from .marl.nets import MlpNet
from .marl.ppo import RolloutMemory, select_action


@dataclass(frozen=True)
class Choice:
    action: int
    logp: float = 0.0
    eps: float = 0.0
    forced: bool = False


# (agent id, its decision context, rng) -> Choice
Chooser = Callable[[int, DecisionContext, np.random.Generator], Choice]


def selectable(ctx: DecisionContext, shield_on: bool) -> List[int]:
    return list(ctx.safe) if shield_on else list(ctx.valid)


def action_mask(actions: Sequence[int], n_actions: int) -> np.ndarray:
    mask = np.zeros(n_actions, dtype=bool)
    mask[list(actions)] = True
    return mask


def random_chooser(env: HighwayEnv) -> Chooser:
    shield_on = env.cfg.toggles.shield

    def choose(i: int, ctx: DecisionContext, rng: np.random.Generator) -> Choice:
        options = selectable(ctx, shield_on)
        if not options:
            return Choice(env.es_index, forced=True)
        return Choice(int(rng.choice(options)))

    return choose


def maintain_chooser(env: HighwayEnv) -> Chooser:
    maintain = env.actions.index(MAINTAIN)
    shield_on = env.cfg.toggles.shield

    def choose(i: int, ctx: DecisionContext, rng: np.random.Generator) -> Choice:
        if maintain in selectable(ctx, shield_on):
            return Choice(maintain)
        return Choice(env.es_index, forced=True)

    return choose


def policy_chooser(env: HighwayEnv, net: MlpNet, thetas: Sequence[np.ndarray], eps: float, greedy: bool = False) -> Chooser:
    """Decentralised execution: agent ``i`` sees only its observation and ``thetas[i]``."""
    shield_on = env.cfg.toggles.shield

    def choose(i: int, ctx: DecisionContext, rng: np.random.Generator) -> Choice:
        options = selectable(ctx, shield_on)
        a, logp = select_action(net, thetas[i], ctx.obs, options, eps, rng, env.es_index, greedy=greedy)
        return Choice(a, logp, eps, forced=not options)

    return choose


def joint_observation(env: HighwayEnv, contexts: Dict[int, DecisionContext]) -> np.ndarray:
    """All agents' local observations side by side, each with an active flag."""
    parts = []
    for i in env.agent_ids:
        if i in contexts:
            parts.append(np.append(contexts[i].obs, 1.0))
        else:
            parts.append(np.zeros(env.obs_dim + 1))
    return np.concatenate(parts)


@dataclass
class EpisodeResult:
    records: List[dict]
    metrics: Metrics
    channel: List[dict]


def run_episode(
    env: HighwayEnv,
    chooser: Chooser,
    seed: int,
    discount_gamma: float = 0.99,
    memories: Optional[Sequence[RolloutMemory]] = None,
) -> EpisodeResult:
    """Play one episode to the time limit.

    With ``memories`` the transitions are stored for learning: rewards that
    arrive after an agent is done are discounted into its last transition,
    and an agent still driving at the time limit bootstraps from the final
    joint observation.
    """
    sc = env.cfg.scenario
    contexts = env.reset(seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    last_tick = {i: 0 for i in env.agent_ids}
    for t in range(sc.episode_len):
        joint = joint_observation(env, contexts) if memories is not None else None
        choices = {i: chooser(i, ctx, rng) for i, ctx in contexts.items()}
        if memories is not None:
            for i, ch in choices.items():
                ctx = contexts[i]
                mask = action_mask(selectable(ctx, env.cfg.toggles.shield), env.n_actions)
                memories[i].add(ctx.obs, joint, mask, ch.action, 0.0, ch.logp, ch.eps, ch.forced)
                last_tick[i] = t
        out = env.step({i: ch.action for i, ch in choices.items()})
        contexts = env.contexts
        if memories is None:
            continue
        for i in env.agent_ids:
            mem = memories[i]
            if not len(mem):
                continue
            if i in choices:
                mem.rewards[-1] += out.rewards[i]
                if out.done[i]:
                    mem.dones[-1] = 1.0
                else:
                    ctx = contexts[i]
                    mem.next_obs[-1] = ctx.obs
                    mem.next_masks[-1] = action_mask(selectable(ctx, env.cfg.toggles.shield), env.n_actions)
            elif out.done[i]:
                mem.rewards[-1] += discount_gamma ** (t - last_tick[i]) * out.rewards[i]

    if memories is not None:
        final_joint = joint_observation(env, contexts)
        for i in env.agent_ids:
            mem = memories[i]
            boot = final_joint if mem.dones and mem.dones[-1] == 0.0 else None
            mem.segments.append((len(mem), boot))

    metrics = episode_metrics(env.records, sc.dt, sc.episode_len, discount_gamma)
    return EpisodeResult(list(env.records), metrics, env.channel_trace())
