"""Robust MAPPO pieces: masked policy, GAE, losses with analytic gradients, updates.

Every agent owns three nets: a policy over its local observation, a PPO critic
over the joint observation (centralised training), and a worst-case Q net over
its local observation. Execution only touches the agent's own policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .nets import Adam, MlpNet, clip_grad


class EmptyMemoryError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    """A loss or parameter went NaN/inf during an update."""


@dataclass(frozen=True)
class TrainConfig:
    n_episodes: int = 200
    lr_actor: float = 1e-4
    lr_critic: float = 2e-4
    lr_worst_q: float = 2e-4
    discount_gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch: int = 128
    ent_coef: float = 0.01
    max_grad_norm: float = 0.5
    eps_start: float = 0.5
    eps_end: float = 0.05
    rho: float = 0.05
    n_perturb: int = 8
    lambda_max: float = 0.5
    lambda_ramp_frac: float = 0.5
    lambda_frozen: bool = False
    hidden: Tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if not 0.0 < self.discount_gamma <= 1.0:
            raise ValueError("discount_gamma must be in (0, 1]")
        if self.n_episodes < 1 or self.epochs < 1 or self.minibatch < 1:
            raise ValueError("n_episodes, epochs and minibatch must be positive")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def epsilon(self, episode: int) -> float:
        """Linear exploration decay over the run."""
        if self.n_episodes <= 1:
            return self.eps_end
        frac = min(1.0, episode / (self.n_episodes - 1))
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    @property
    def lambda_step(self) -> float:
        ramp = max(1.0, self.lambda_ramp_frac * self.n_episodes)
        return self.lambda_max / ramp


# --- policy ------------------------------------------------------------------


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax restricted to ``mask``; rows with an empty mask come back all zero."""
    logits = np.asarray(logits, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    z = np.where(mask, logits, -np.inf)
    top = np.max(z, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(z - top), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def behaviour_probs(logits: np.ndarray, mask: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """epsilon-greedy mixture: uniform over the mask with prob ``eps``, else the masked softmax."""
    pi = masked_softmax(logits, mask)
    count = mask.sum(axis=-1, keepdims=True)
    uniform = np.divide(mask.astype(float), count, out=np.zeros(mask.shape), where=count > 0)
    eps = np.asarray(eps, dtype=float)
    if eps.ndim:
        eps = eps.reshape(eps.shape + (1,) * (pi.ndim - eps.ndim))
    return (1.0 - eps) * pi + eps * uniform


def select_action(
    net: MlpNet,
    theta: np.ndarray,
    obs: np.ndarray,
    safe_set: Sequence[int],
    eps: float,
    rng: np.random.Generator,
    fallback: int,
    greedy: bool = False,
) -> Tuple[int, float]:
    """Pick an action for one agent from its own observation and parameters.

    Returns ``(action, log-prob)``; an empty ``safe_set`` yields ``fallback``
    with probability 1.
    """
    if len(safe_set) == 0:
        return fallback, 0.0
    logits = net.forward(theta, obs)
    mask = np.zeros(net.out_dim, dtype=bool)
    mask[list(safe_set)] = True
    if greedy:
        a = int(np.argmax(np.where(mask, logits, -np.inf)))
        return a, 0.0
    p = behaviour_probs(logits, mask, eps)
    a = int(rng.choice(net.out_dim, p=p / p.sum()))
    return a, float(np.log(p[a]))


# --- advantages --------------------------------------------------------------


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_value: float,
    gamma: float,
    lam: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and the matching return targets."""
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    next_value = last_value
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# --- losses ------------------------------------------------------------------


def policy_loss(
    net: MlpNet,
    theta: np.ndarray,
    obs: np.ndarray,
    masks: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    eps: np.ndarray,
    adv: np.ndarray,
    q_scaled: np.ndarray,
    lam: float,
    clip_eps: float,
    ent_coef: float,
) -> Tuple[float, np.ndarray]:
    """Clipped surrogate minus entropy bonus minus ``lam`` times the expected worst-case Q.

    ``q_scaled`` holds standardised worst-Q values for every action; the
    robustness term is ``sum_b pi(b|o) q_scaled(o, b)``, pushing probability
    toward actions whose value survives observation perturbations.
    """
    logits, acts = net.forward_cache(theta, obs)
    n = len(obs)
    rows = np.arange(n)
    pi = masked_softmax(logits, masks)
    mix = behaviour_probs(logits, masks, eps)
    p_a = mix[rows, actions]
    logp = np.log(p_a)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_term = ratio * adv
    surr = np.minimum(unclipped_term, clipped * adv)
    log_pi = np.where(masks, np.log(np.where(masks, pi, 1.0)), 0.0)
    entropy = -(pi * log_pi).sum(axis=1)
    robust = (pi * q_scaled).sum(axis=1)
    loss = -surr.mean() - ent_coef * entropy.mean() - lam * robust.mean()

    # d surr / d logp: only the unclipped branch carries gradient.
    g_surr = np.where(unclipped_term <= clipped * adv, ratio * adv, 0.0)
    onehot = np.zeros_like(pi)
    onehot[rows, actions] = 1.0
    dlogp = ((1.0 - eps)[:, None] * pi[rows, actions][:, None] * (onehot - pi)) / p_a[:, None]
    d_entropy = -pi * (log_pi + entropy[:, None])
    d_robust = pi * (q_scaled - robust[:, None])
    grad_logits = -(g_surr[:, None] * dlogp) - ent_coef * d_entropy - lam * d_robust
    grad_logits = np.where(masks, grad_logits, 0.0) / n
    return float(loss), net.backward(theta, acts, grad_logits)


def critic_loss(net: MlpNet, phi: np.ndarray, joint_obs: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    values, acts = net.forward_cache(phi, joint_obs)
    err = values[:, 0] - targets
    loss = float(np.mean(err * err))
    grad_out = (2.0 * err / len(err))[:, None]
    return loss, net.backward(phi, acts, grad_out)


def worst_q_loss(
    net: MlpNet, omega: np.ndarray, obs: np.ndarray, actions: np.ndarray, targets: np.ndarray
) -> Tuple[float, np.ndarray]:
    q, acts = net.forward_cache(omega, obs)
    rows = np.arange(len(obs))
    err = q[rows, actions] - targets
    loss = float(np.mean(err * err))
    grad_out = np.zeros_like(q)
    grad_out[rows, actions] = 2.0 * err / len(err)
    return loss, net.backward(omega, acts, grad_out)


def worst_q_targets(
    policy: MlpNet,
    theta: np.ndarray,
    qnet: MlpNet,
    omega: np.ndarray,
    rewards: np.ndarray,
    next_obs: np.ndarray,
    next_masks: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    rho: float,
    n_perturb: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """``r + gamma (1 - d) min_k E_{a~pi(.|o'+d_k)} Q(o'+d_k, a)`` over sampled l-inf perturbations.

    ``d_0 = 0`` is always included, so ``rho = 0`` gives the ordinary target.
    """
    n, dim = next_obs.shape
    worst = np.full(n, np.inf)
    for k in range(n_perturb + 1):
        if k == 0 or rho == 0.0:
            shifted = next_obs
        else:
            shifted = next_obs + rng.uniform(-rho, rho, size=(n, dim))
        pi = masked_softmax(policy.forward(theta, shifted), next_masks)
        v = (pi * qnet.forward(omega, shifted)).sum(axis=1)
        worst = np.minimum(worst, v)
        if rho == 0.0:
            break
    return rewards + gamma * (1.0 - dones) * worst


# --- state -------------------------------------------------------------------


@dataclass
class AgentLearner:
    theta: np.ndarray
    phi: np.ndarray
    omega: np.ndarray
    lam: float
    opt_theta: Adam
    opt_phi: Adam
    opt_omega: Adam


@dataclass
class TrainerState:
    policy_net: MlpNet
    critic_net: MlpNet
    q_net: MlpNet
    agents: List[AgentLearner]
    epoch: int = 0

    @classmethod
    def create(cls, obs_dim: int, joint_dim: int, n_actions: int, n_agents: int, cfg: TrainConfig, rng) -> "TrainerState":
        policy_net = MlpNet((obs_dim, *cfg.hidden, n_actions))
        critic_net = MlpNet((joint_dim, *cfg.hidden, 1))
        q_net = MlpNet((obs_dim, *cfg.hidden, n_actions))
        agents = []
        for _ in range(n_agents):
            theta = policy_net.init(rng)
            phi = critic_net.init(rng, out_scale=1.0)
            omega = q_net.init(rng, out_scale=1.0)
            agents.append(
                AgentLearner(
                    theta, phi, omega, 0.0,
                    Adam(policy_net.n_params, cfg.lr_actor),
                    Adam(critic_net.n_params, cfg.lr_critic),
                    Adam(q_net.n_params, cfg.lr_worst_q),
                )
            )
        return cls(policy_net, critic_net, q_net, agents)


@dataclass
class RolloutMemory:
    """One agent's transitions from one or more episodes, plus bootstrap data."""

    obs: List[np.ndarray] = field(default_factory=list)
    joint: List[np.ndarray] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    logp: List[float] = field(default_factory=list)
    eps: List[float] = field(default_factory=list)
    forced: List[bool] = field(default_factory=list)
    dones: List[float] = field(default_factory=list)
    next_obs: List[np.ndarray] = field(default_factory=list)
    next_masks: List[np.ndarray] = field(default_factory=list)
    # Index just past the end of each episode and the joint obs to bootstrap from (None if terminal).
    segments: List[Tuple[int, Optional[np.ndarray]]] = field(default_factory=list)
    values: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.actions)

    def add(self, obs, joint, mask, action, reward, logp, eps, forced) -> None:
        self.obs.append(obs)
        self.joint.append(joint)
        self.masks.append(mask)
        self.actions.append(action)
        self.rewards.append(reward)
        self.logp.append(logp)
        self.eps.append(eps)
        self.forced.append(forced)
        self.dones.append(0.0)
        self.next_obs.append(np.zeros_like(obs))
        self.next_masks.append(np.zeros_like(mask))


def _finite(*values) -> bool:
    return all(np.all(np.isfinite(v)) for v in values)


def ppo_update(memories: Sequence[RolloutMemory], state: TrainerState, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One training round for every agent from its own memory."""
    if not memories or all(len(m) == 0 for m in memories):
        raise EmptyMemoryError("no transitions to learn from")
    stats = {"policy_loss": [], "critic_loss": [], "worst_q_loss": []}
    for learner, mem in zip(state.agents, memories):
        if len(mem) == 0:
            continue
        obs = np.asarray(mem.obs)
        joint = np.asarray(mem.joint)
        masks = np.asarray(mem.masks, dtype=bool)
        actions = np.asarray(mem.actions, dtype=int)
        rewards = np.asarray(mem.rewards, dtype=float)
        old_logp = np.asarray(mem.logp, dtype=float)
        eps = np.asarray(mem.eps, dtype=float)
        forced = np.asarray(mem.forced, dtype=bool)
        dones = np.asarray(mem.dones, dtype=float)
        next_obs = np.asarray(mem.next_obs)
        next_masks = np.asarray(mem.next_masks, dtype=bool)

        values = state.critic_net.forward(learner.phi, joint)[:, 0]
        mem.values = values
        adv = np.zeros(len(mem))
        returns = np.zeros(len(mem))
        start = 0
        for end, boot in mem.segments:
            last = 0.0 if boot is None else float(state.critic_net.forward(learner.phi, boot)[0])
            a, r = gae(rewards[start:end], values[start:end], dones[start:end], last, cfg.discount_gamma, cfg.gae_lambda)
            adv[start:end], returns[start:end] = a, r
            start = end

        q_targets = worst_q_targets(
            state.policy_net, learner.theta, state.q_net, learner.omega, rewards, next_obs, next_masks,
            dones, cfg.discount_gamma, cfg.rho, cfg.n_perturb, rng,
        )

        policy_idx = np.flatnonzero(~forced)
        if len(policy_idx):
            a_sel = adv[policy_idx]
            adv_n = np.zeros(len(mem))
            adv_n[policy_idx] = (a_sel - a_sel.mean()) / (a_sel.std() + 1e-8)
        else:
            adv_n = np.zeros(len(mem))

        for _ in range(cfg.epochs):
            order = rng.permutation(len(mem))
            for lo in range(0, len(mem), cfg.minibatch):
                batch = order[lo : lo + cfg.minibatch]
                loss_v, g_phi = critic_loss(state.critic_net, learner.phi, joint[batch], returns[batch])
                loss_q, g_omega = worst_q_loss(state.q_net, learner.omega, obs[batch], actions[batch], q_targets[batch])
                pol = batch[~forced[batch]]
                loss_p, g_theta = 0.0, None
                if len(pol):
                    q = state.q_net.forward(learner.omega, obs[pol])
                    m = masks[pol]
                    q_masked = q[m]
                    q_scaled = np.where(m, (q - q_masked.mean()) / (q_masked.std() + 1e-8), 0.0)
                    loss_p, g_theta = policy_loss(
                        state.policy_net, learner.theta, obs[pol], m, actions[pol], old_logp[pol],
                        eps[pol], adv_n[pol], q_scaled, learner.lam, cfg.clip_eps, cfg.ent_coef,
                    )
                if not _finite(loss_v, loss_q, loss_p, g_phi, g_omega) or (g_theta is not None and not _finite(g_theta)):
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {state.epoch}: policy={loss_p} critic={loss_v} worst_q={loss_q}"
                    )
                learner.phi = learner.opt_phi.step(learner.phi, clip_grad(g_phi, cfg.max_grad_norm))
                learner.omega = learner.opt_omega.step(learner.omega, clip_grad(g_omega, cfg.max_grad_norm))
                if g_theta is not None:
                    learner.theta = learner.opt_theta.step(learner.theta, clip_grad(g_theta, cfg.max_grad_norm))
                stats["policy_loss"].append(loss_p)
                stats["critic_loss"].append(loss_v)
                stats["worst_q_loss"].append(loss_q)

    state.epoch += 1
    if not cfg.lambda_frozen:
        for learner in state.agents:
            learner.lam = min(cfg.lambda_max, learner.lam + cfg.lambda_step)
    return {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}
