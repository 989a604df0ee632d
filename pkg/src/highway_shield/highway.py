"""Multi-lane highway world: geometry, sensing, rewards, stepping and metrics.

Each tick runs: V2V broadcast round -> observations -> per-agent candidate
references and safety reports (``DecisionContext``) -> the caller picks one
action per agent -> ``step`` applies the filtered controls, integrates all
vehicles together, scores collisions and rewards.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .comm import Channel, ChannelConfig, SharedState
from .controllers import (
    EMERGENCY_STOP,
    ActionId,
    ActionTarget,
    AgentController,
    ControllerMemory,
    EnvLimits,
    InvalidActionError,
    LaneGeometry,
    PidGains,
    action_space,
    action_to_target,
    lane_center,
    pid_control,
)
from .dynamics import ControlInput, VehicleParams, VehicleState, step as integrate
from .shield import BarrierParams, Neighbor, SafeActionReport, safe_action_set


class ConfigError(ValueError):
    pass


class Geometry(str, enum.Enum):
    STRAIGHT = "straight"
    LOOP = "loop"


@dataclass(frozen=True)
class Placement:
    lane: int
    x: float = 0.0


@dataclass
class ScenarioConfig:
    """World layout. ``spawns`` defaults to one agent per lane at ``x = 0``."""

    name: str = "three_lane_obstacle"
    n_lanes: int = 3
    lane_width: float = 0.6
    track_length: float = 20.0
    geometry: Geometry = Geometry.STRAIGHT
    n_agents: int = 3
    spawns: Optional[List[Placement]] = None
    goal_x: Optional[float] = None
    obstacles: List[Placement] = field(default_factory=list)
    episode_len: int = 400
    dt: float = 0.1
    physics_substeps: int = 400
    vehicle_radius: float = 0.18
    safety_margin: float = 0.1
    corridor_margin: float = 0.05
    n_rays: int = 8
    ray_max: float = 5.0
    init_speed: float = 0.0
    init_target_speeds: Optional[List[float]] = None
    lane_noise_sigma: float = 0.01
    max_neighbors: int = 2

    def __post_init__(self) -> None:
        self.geometry = Geometry(self.geometry)
        self.spawns = [p if isinstance(p, Placement) else Placement(**p) for p in self.resolved_spawns()]
        self.obstacles = [p if isinstance(p, Placement) else Placement(**p) for p in self.obstacles]
        self.validate()

    def resolved_spawns(self) -> List[Placement]:
        if self.spawns is not None:
            return list(self.spawns)
        return [Placement(i % self.n_lanes, -(i // self.n_lanes) * 1.0) for i in range(self.n_agents)]

    @property
    def goal(self) -> float:
        return self.track_length if self.goal_x is None else self.goal_x

    @property
    def standoff(self) -> float:
        return 2.0 * self.vehicle_radius + self.safety_margin

    def target_speeds(self) -> List[float]:
        if self.init_target_speeds is None:
            return [1.0] * self.n_agents
        return list(self.init_target_speeds)

    def validate(self) -> None:
        if self.n_lanes < 1:
            raise ConfigError("n_lanes must be >= 1")
        if self.n_agents < 1 or len(self.spawns) != self.n_agents:
            raise ConfigError("need exactly one spawn per agent")
        if not self.track_length > 0 or not self.dt > 0 or self.episode_len < 1:
            raise ConfigError("track_length, dt and episode_len must be positive")
        if self.init_target_speeds is not None and len(self.init_target_speeds) != self.n_agents:
            raise ConfigError("init_target_speeds needs one entry per agent")
        for p in self.spawns + self.obstacles:
            if not 0 <= p.lane < self.n_lanes:
                raise ConfigError(f"lane {p.lane} outside road")
        for p in self.obstacles:
            if not 0 <= p.x <= self.track_length:
                raise ConfigError(f"obstacle at x={p.x} outside track")
        if self.geometry is Geometry.STRAIGHT:
            for p in self.spawns:
                if not p.x < self.goal:
                    raise ConfigError("spawn must lie before the goal")
        placed = [(p.x, lane_center(p.lane, self.n_lanes, self.lane_width)) for p in self.spawns + self.obstacles]
        for i in range(len(placed)):
            for j in range(i):
                if math.dist(placed[i], placed[j]) < 2.0 * self.vehicle_radius:
                    raise ConfigError("overlapping spawns/obstacles")


@dataclass(frozen=True)
class RewardWeights:
    """Reward settings.

    ``mode`` picks the three-term weighted sum (``"simple"``) or the
    flow/destination/collision/safety decomposition (``"decomposed"``).
    """

    mode: str = "decomposed"
    w1: float = 1.0
    w2: float = 5.0
    w3: float = 1.0
    alpha_mix: float = 1.0
    flow_coef: float = 3.0
    interpolate: float = 1.0
    v_ref: float = 1.0
    safe_match_bonus: float = 0.1
    safe_stop_penalty: float = -0.3
    collision_scale: float = 40.0
    prox_penalty: float = 0.0
    prox_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise ConfigError("alpha_mix must be in [0, 1]")
        if self.mode not in ("simple", "decomposed"):
            raise ConfigError(f"unknown reward mode {self.mode!r}")


@dataclass(frozen=True)
class Toggles:
    """Method switches; named methods are presets over these."""

    shield: bool = True
    comm: bool = True
    t_delay: int = 1
    dropout_p: float = 0.0
    comm_noise_sigma: float = 0.0
    obs_noise_sigma: float = 0.0
    delay_ego_state: bool = False
    harmonize: bool = True
    harmonize_range: float = 3.0


@dataclass
class SimConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    barrier: Optional[BarrierParams] = None
    pid: PidGains = field(default_factory=PidGains)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    toggles: Toggles = field(default_factory=Toggles)
    speed_step: float = 0.5
    k_levels: int = 2

    def __post_init__(self) -> None:
        if self.barrier is None:
            self.barrier = BarrierParams.for_vehicle(self.vehicle)


# --- rewards -----------------------------------------------------------------


def reward_simple(speed: float, collision_intensity: float, progress: float, w: RewardWeights) -> float:
    """Weighted speed, collision and progress terms; collisions are penalised."""
    return w.w1 * abs(speed) - w.w2 * collision_intensity + w.w3 * abs(progress)


def flow_reward(v: float, w: RewardWeights) -> float:
    return 0.2 * w.flow_coef * (v - w.v_ref) / 3.6


def dest_reward(x: float, x_spawn: float, x_goal: float, w: RewardWeights) -> float:
    return (x - x_spawn) / ((x_goal - x_spawn) * w.interpolate)


def collision_reward(intensities: Sequence[float], w: RewardWeights) -> float:
    """Penalty for newly scored contacts, at least 1 per event."""
    if not intensities:
        return 0.0
    return -(sum(intensities) / w.collision_scale + 1.0)


def safe_reward(chosen: ActionId, shield_true: ActionId, w: RewardWeights) -> float:
    if shield_true == EMERGENCY_STOP:
        return w.safe_stop_penalty
    if chosen == shield_true:
        return w.safe_match_bonus
    return 0.0


@dataclass(frozen=True)
class RewardTerms:
    flow: float = 0.0
    dest: float = 0.0
    coll: float = 0.0
    safe: float = 0.0


def reward_decomposed(terms: Sequence[RewardTerms], w: RewardWeights) -> List[float]:
    """Mix task terms between the team mean and the agent's own, then add penalties."""
    n = len(terms)
    team = sum(t.flow + t.dest for t in terms) / n
    return [w.alpha_mix * team + (1.0 - w.alpha_mix) * (t.flow + t.dest) + t.coll + t.safe for t in terms]


def task_rewards(terms: Sequence[RewardTerms], w: RewardWeights) -> List[float]:
    """Mixed flow + destination part only (penalties excluded)."""
    n = len(terms)
    team = sum(t.flow + t.dest for t in terms) / n
    return [w.alpha_mix * team + (1.0 - w.alpha_mix) * (t.flow + t.dest) for t in terms]


# --- geometry helpers ----------------------------------------------------------


def coast(x: float, v: float, a: float, tau: float, vp: VehicleParams) -> Tuple[float, float]:
    """Continuous constant-acceleration motion for ``tau`` seconds with speed saturation."""
    if tau <= 0 or a == 0:
        return x + v * tau, v
    limit = vp.v_min if a < 0 else vp.v_max
    t_sat = (limit - v) / a
    if t_sat >= tau:
        return x + v * tau + 0.5 * a * tau * tau, v + a * tau
    t_sat = max(t_sat, 0.0)
    return x + v * t_sat + 0.5 * a * t_sat * t_sat + limit * (tau - t_sat), limit


def ray_cast(
    origin: Tuple[float, float],
    heading: float,
    centers: np.ndarray,
    radii: np.ndarray,
    n_rays: int,
    ray_max: float,
) -> np.ndarray:
    """Distance along each ray to the first disc surface, clipped to ``ray_max``.

    Ray 0 points along ``heading``; the rest are spaced evenly counter-clockwise.
    A ray starting inside a disc reads 0.
    """
    ox, oy = origin
    out = [ray_max] * n_rays
    discs = []
    for (cx, cy), r in zip(np.asarray(centers, dtype=float).reshape(-1, 2).tolist(), np.asarray(radii, dtype=float).tolist()):
        rx, ry = cx - ox, cy - oy
        c = rx * rx + ry * ry - r * r
        if c <= 0.0:
            return np.zeros(n_rays)
        # Discs entirely beyond range cannot shorten any ray.
        if math.sqrt(rx * rx + ry * ry) - r < ray_max:
            discs.append((rx, ry, c))
    if discs:
        for k in range(n_rays):
            ang = heading + 2.0 * math.pi * k / n_rays
            dx, dy = math.cos(ang), math.sin(ang)
            best = out[k]
            for rx, ry, c in discs:
                b = dx * rx + dy * ry
                disc = b * b - c
                if disc >= 0.0 and b > 0.0:
                    t = b - math.sqrt(disc)
                    if t < best:
                        best = t
            out[k] = best
    return np.array(out)


# --- world -------------------------------------------------------------------


@dataclass
class AgentStatus:
    state: VehicleState
    controller: AgentController
    spawn_x: float
    goal_x: float
    progress: float = 0.0
    last_accel: float = 0.0
    finished: bool = False
    finish_tick: Optional[int] = None
    collided: bool = False

    @property
    def active(self) -> bool:
        return not (self.finished or self.collided)


@dataclass
class Candidate:
    target: ActionTarget
    u_ref: ControlInput
    memory: ControllerMemory


@dataclass
class DecisionContext:
    """What agent ``i`` decides from at one tick."""

    obs: np.ndarray
    valid: List[int]
    safe: List[int]
    candidates: Dict[int, Candidate]
    report: Optional[SafeActionReport]


@dataclass
class StepOutcome:
    obs: Dict[int, np.ndarray]
    rewards: Dict[int, float]
    terms: Dict[int, RewardTerms]
    collisions: Dict[int, List[float]]
    done: Dict[int, bool]
    info: dict


@dataclass
class Metrics:
    collisions: int
    time_s: float
    efficiency_return: float
    intervention_rate: float
    mean_flow: float
    finished: int


class HighwayEnv:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        sc = cfg.scenario
        self.actions = action_space(cfg.k_levels)
        self.n_actions = len(self.actions)
        self.es_index = self.actions.index(EMERGENCY_STOP)
        self.limits = EnvLimits(sc.n_lanes, cfg.vehicle.v_min, cfg.vehicle.v_max, cfg.speed_step)
        self.obs_dim = 9 + sc.n_rays + 5 * sc.max_neighbors
        self._lane_centers = [lane_center(k, sc.n_lanes, sc.lane_width) for k in range(sc.n_lanes)]
        self._lane_reach = 0.5 * sc.lane_width + sc.vehicle_radius
        centers = [lane_center(p.lane, sc.n_lanes, sc.lane_width) for p in sc.obstacles]
        self.obstacle_states = [VehicleState(p.x, y, 0.0, 0.0) for p, y in zip(sc.obstacles, centers)]
        self.agent_ids = list(range(sc.n_agents))
        self.tick = 0
        self.records: List[dict] = []

    # -- lifecycle --

    def reset(self, seed: int) -> Dict[int, DecisionContext]:
        sc, cfg = self.cfg.scenario, self.cfg
        self.rng = np.random.default_rng(seed)
        self.tick = 0
        self.records = []
        self.contacts: set = set()
        self.agents: List[AgentStatus] = []
        for spawn, speed in zip(sc.spawns, sc.target_speeds()):
            y = lane_center(spawn.lane, sc.n_lanes, sc.lane_width)
            target = ActionTarget(spawn.lane, min(max(speed, cfg.vehicle.v_min), cfg.vehicle.v_max))
            self.agents.append(
                AgentStatus(
                    state=VehicleState(spawn.x, y, 0.0, sc.init_speed),
                    controller=AgentController(target),
                    spawn_x=spawn.x,
                    goal_x=sc.goal if sc.geometry is Geometry.STRAIGHT else spawn.x + sc.track_length,
                )
            )
        t = cfg.toggles
        self.channel: Optional[Channel] = None
        if t.comm:
            ccfg = ChannelConfig(
                t_delay=t.t_delay,
                dropout_p=t.dropout_p,
                obs_noise_sigma=t.comm_noise_sigma,
                seed=int(self.rng.integers(2**31)),
                delay_ego_state=t.delay_ego_state,
            )
            self.channel = Channel(self.agent_ids, ccfg, trace=True)
            self.channel.prime(-1, self._outgoing(active_only=False))
        self.contexts = self._observe()
        return self.contexts

    def _outgoing(self, active_only: bool = True) -> Dict[int, SharedState]:
        out = {}
        for i, ag in enumerate(self.agents):
            if ag.finished and active_only:
                continue
            s = ag.state
            out[i] = SharedState(
                s.x, s.y, s.psi, s.v,
                lane=self.lane_of(s.y),
                target_lane=ag.controller.target.target_lane,
                target_speed=ag.controller.target.target_speed,
            )
        return out

    # -- geometry --

    def lane_of(self, y: float) -> int:
        sc = self.cfg.scenario
        k = round((sc.n_lanes - 1) - y / sc.lane_width)
        return min(max(k, 0), sc.n_lanes - 1)

    def lanes_overlapped(self, y: float) -> frozenset:
        return frozenset(k for k, c in enumerate(self._lane_centers) if abs(y - c) < self._lane_reach)

    def rel_x(self, x_other: float, x_ego: float) -> float:
        sc = self.cfg.scenario
        dx = x_other - x_ego
        if sc.geometry is Geometry.LOOP:
            dx = (dx + 0.5 * sc.track_length) % sc.track_length - 0.5 * sc.track_length
        return dx

    def _in_corridor(self, y_other: float, y_ego: float) -> bool:
        sc = self.cfg.scenario
        return abs(y_other - y_ego) < 2.0 * sc.vehicle_radius + sc.corridor_margin

    # -- observation and decision context --

    def _observe(self) -> Dict[int, DecisionContext]:
        delivered = {}
        if self.channel is not None:
            delivered = self.channel.broadcast_round(self.tick, self._outgoing())
        contexts = {}
        for i, ag in enumerate(self.agents):
            if not ag.active:
                continue
            shared = delivered.get(i, {})
            shared = {j: m for j, m in shared.items() if not self.agents[j].finished}
            contexts[i] = self._context(i, shared)
        return contexts

    def assemble_observation(self, i: int, shared: Mapping[int, object]) -> np.ndarray:
        sc, vp = self.cfg.scenario, self.cfg.vehicle
        ag = self.agents[i]
        s = ag.state
        lane = self.lane_of(s.y)
        yc = lane_center(lane, sc.n_lanes, sc.lane_width)
        lane_noise = self.rng.normal(0.0, sc.lane_noise_sigma, 3) if sc.lane_noise_sigma > 0 else np.zeros(3)
        left = (yc + 0.5 * sc.lane_width - s.y + lane_noise[0]) / sc.lane_width
        right = (s.y - (yc - 0.5 * sc.lane_width) + lane_noise[1]) / sc.lane_width
        ego = np.array(
            [
                ag.progress / (ag.goal_x - ag.spawn_x),
                lane / max(1, sc.n_lanes - 1),
                s.v / vp.v_max,
                ag.last_accel / abs(vp.a_min),
                ag.controller.target.target_speed / vp.v_max,
                left,
                right,
                (s.psi + lane_noise[2]) / vp.delta_max,
                ag.controller.target.target_lane - lane,
            ]
        )
        rays = self.rays(i) / sc.ray_max
        sigma = self.cfg.toggles.obs_noise_sigma
        if sigma > 0:
            ego[:8] += self.rng.normal(0.0, sigma, 8)
            rays = rays + self.rng.normal(0.0, sigma, len(rays))

        block = np.zeros((sc.max_neighbors, 5))
        rows = []
        for j, msg in shared.items():
            p = msg.payload
            rows.append((abs(self.rel_x(p.x, s.x)), j, p))
        rows.sort(key=lambda r: (r[0], r[1]))
        for slot, (_, _, p) in enumerate(rows[: sc.max_neighbors]):
            block[slot] = [
                1.0,
                min(max(self.rel_x(p.x, s.x) / sc.ray_max, -2.0), 2.0),
                (p.y - s.y) / sc.lane_width,
                p.v / vp.v_max,
                p.target_speed / vp.v_max,
            ]
        return np.concatenate([ego, rays, block.ravel()])

    def rays(self, i: int) -> np.ndarray:
        sc = self.cfg.scenario
        s = self.agents[i].state
        pts = [(s.x + self.rel_x(o.x, s.x), o.y) for o in self.obstacle_states]
        pts += [
            (s.x + self.rel_x(a.state.x, s.x), a.state.y)
            for j, a in enumerate(self.agents)
            if j != i and not a.finished
        ]
        centers = np.array(pts, dtype=float).reshape(-1, 2)
        radii = np.full(len(centers), sc.vehicle_radius)
        return ray_cast((s.x, s.y), s.psi, centers, radii, sc.n_rays, sc.ray_max)

    def _shield_neighbors(self, i: int, ego: VehicleState, shared) -> Tuple[List[Neighbor], List[Neighbor], Dict[int, SharedState]]:
        """Neighbours as the shield of agent ``i`` sees them, plus merge candidates.

        With comm, other vehicles come from delayed V2V reports rolled forward
        over their age: as the leader they are assumed to brake as hard as
        possible, as the follower to accelerate as hard as possible. Without
        comm, vehicles inside sensor range are measured directly.
        """
        sc, vp = self.cfg.scenario, self.cfg.vehicle
        dt = sc.dt
        neighbors: List[Neighbor] = []
        for o in self.obstacle_states:
            st = VehicleState(ego.x + self.rel_x(o.x, ego.x), o.y, 0.0, 0.0)
            neighbors.append(Neighbor(st, self.lanes_overlapped(o.y), self._in_corridor(o.y, ego.y), 0.0))

        reports: Dict[int, SharedState] = {}
        if self.channel is not None:
            for j, msg in shared.items():
                p = msg.payload
                tau = (self.tick - msg.tick) * dt
                x0 = ego.x + self.rel_x(p.x, ego.x)
                v0 = max(p.v, 0.0)
                xl, vl = coast(x0, v0, vp.a_min, tau, vp)
                xf, vf = coast(x0, v0, vp.a_max, tau, vp)
                lanes = self.lanes_overlapped(p.y) | {p.target_lane}
                neighbors.append(
                    Neighbor(
                        VehicleState(xl, p.y, p.psi, vl),
                        frozenset(lanes),
                        self._in_corridor(p.y, ego.y),
                        0.0 if self.agents[j].collided else vp.a_min,
                        follower_state=VehicleState(xf, p.y, p.psi, vf),
                    )
                )
                reports[j] = p
        else:
            for j, other in enumerate(self.agents):
                if j == i or other.finished:
                    continue
                s = other.state
                dx = self.rel_x(s.x, ego.x)
                if math.hypot(dx, s.y - ego.y) > sc.ray_max:
                    continue
                reports[j] = SharedState(ego.x + dx, s.y, s.psi, s.v, self.lane_of(s.y))
                neighbors.append(
                    Neighbor(
                        VehicleState(ego.x + dx, s.y, s.psi, s.v),
                        self.lanes_overlapped(s.y),
                        self._in_corridor(s.y, ego.y),
                        0.0 if other.collided else vp.a_min,
                    )
                )

        # Simultaneous merges: yield to lower-id vehicles that could enter the same lane.
        yield_to = []
        for n, j in zip(neighbors[len(self.obstacle_states):], reports):
            if j < i:
                adjacent = {k + d for k in n.lanes for d in (-1, 1)} & set(range(sc.n_lanes))
                yield_to.append(replace(n, lanes=frozenset(adjacent)))
        return neighbors, yield_to, reports

    def _context(self, i: int, shared) -> DecisionContext:
        cfg, sc, vp = self.cfg, self.cfg.scenario, self.cfg.vehicle
        ag = self.agents[i]
        obs = self.assemble_observation(i, shared)
        ctrl = ag.controller

        ego = ag.state
        if self.channel is not None and cfg.toggles.delay_ego_state:
            own = self.channel.own_state(i, self.tick)
            if own is not None:
                ego = VehicleState(own.x, own.y, own.psi, own.v)

        neighbors, yield_to, reports = ([], [], {})
        if cfg.toggles.shield or self.channel is not None:
            neighbors, yield_to, reports = self._shield_neighbors(i, ego, shared)

        candidates: Dict[int, Candidate] = {}
        caps: Dict[int, Optional[float]] = {}
        ego_lane = self.lane_of(ag.state.y)
        for idx, action in enumerate(self.actions):
            if idx == self.es_index:
                continue
            try:
                target = action_to_target(action, ctrl.target.target_lane, ctrl.target.target_speed, self.limits)
            except InvalidActionError:
                continue
            if abs(target.target_lane - ego_lane) > 1:
                # One lane at a time: finish (or abort) the current change first.
                continue
            tracked = target
            if self.channel is not None and cfg.toggles.harmonize:
                if target.target_lane not in caps:
                    caps[target.target_lane] = self._leader_target_speed(ego, target.target_lane, reports)
                cap = caps[target.target_lane]
                if cap is not None and cap < target.target_speed:
                    tracked = replace(target, target_speed=cap)
            geometry = LaneGeometry(lane_center(target.target_lane, sc.n_lanes, sc.lane_width))
            u, memory = pid_control(ag.state, tracked, geometry, cfg.pid, vp, sc.dt, ctrl.memory)
            if target.target_lane != ctrl.target.target_lane:
                memory = replace(memory, integral=0.0)
            candidates[idx] = Candidate(target, u, memory)

        valid = sorted(candidates)
        report = None
        if cfg.toggles.shield:
            view = {idx: (c.u_ref, c.target.target_lane) for idx, c in candidates.items()}
            report = safe_action_set(
                view,
                ego,
                neighbors,
                cfg.barrier,
                vp,
                current_lanes=self.lanes_overlapped(ego.y),
                standoff=sc.standoff,
                dt=sc.dt,
                substeps=sc.physics_substeps,
                yield_to=yield_to,
            )
            safe = [idx for idx in valid if report.results[idx].feasible]
        else:
            safe = list(valid)
        return DecisionContext(obs, valid, safe, candidates, report)

    def _leader_target_speed(self, ego: VehicleState, lane: int, reports: Mapping[int, SharedState]) -> Optional[float]:
        best = None
        for p in reports.values():
            dx = self.rel_x(p.x, ego.x)
            if 0 < dx <= self.cfg.toggles.harmonize_range and lane in (self.lanes_overlapped(p.y) | {p.target_lane}):
                if best is None or dx < best[0]:
                    best = (dx, p.target_speed)
        return None if best is None else best[1]

    # -- shield bookkeeping --

    def shield_true_action(self, ctx: DecisionContext, chosen: int) -> int:
        """The action the shield itself would endorse for this tick."""
        if ctx.report is None:
            return chosen
        if not ctx.safe:
            return self.es_index
        res = ctx.report.results
        if chosen in ctx.safe and not res[chosen].intervened:
            return chosen

        def deviation(idx: int) -> float:
            return abs(res[idx].u_star.a - ctx.candidates[idx].u_ref.a)

        return min(ctx.safe, key=lambda idx: (deviation(idx), idx))

    def _emergency(self, i: int) -> Candidate:
        cfg, sc = self.cfg, self.cfg.scenario
        ag = self.agents[i]
        lane = self.lane_of(ag.state.y)
        target = ActionTarget(lane, 0.0)
        geometry = LaneGeometry(lane_center(lane, sc.n_lanes, sc.lane_width))
        u, memory = pid_control(ag.state, target, geometry, cfg.pid, cfg.vehicle, sc.dt, ag.controller.memory)
        if lane != ag.controller.target.target_lane:
            memory = replace(memory, integral=0.0)
        return Candidate(target, ControlInput(u.delta, cfg.vehicle.a_min), memory)

    # -- stepping --

    def step(self, actions: Mapping[int, int]) -> StepOutcome:
        cfg, sc, vp = self.cfg, self.cfg.scenario, self.cfg.vehicle
        shield_on = cfg.toggles.shield
        applied: Dict[int, int] = {}
        intervened: Dict[int, bool] = {}
        h_values: Dict[int, float] = {}
        safe_terms: Dict[int, float] = {}

        for i, ctx in self.contexts.items():
            a = int(actions[i])
            chosen = a
            if a == self.es_index or (shield_on and not ctx.safe):
                cand = self._emergency(i)
                u = cand.u_ref
                applied[i] = self.es_index
                intervened[i] = shield_on
            else:
                if a not in ctx.candidates:
                    raise InvalidActionError(f"agent {i}: action {self.actions[a]} is not available")
                if shield_on and a not in ctx.safe:
                    raise InvalidActionError(f"agent {i}: action {self.actions[a]} is outside the safe set")
                cand = ctx.candidates[a]
                u = cand.u_ref
                intervened[i] = False
                if shield_on:
                    res = ctx.report.results[a]
                    u, intervened[i] = res.u_star, res.intervened
                    h_values[i] = res.h
                applied[i] = a
            if shield_on:
                truth = self.shield_true_action(ctx, chosen)
                safe_terms[i] = safe_reward(self.actions[chosen], self.actions[truth], cfg.rewards)
            ag = self.agents[i]
            ag.controller.commit(cand.target, cand.memory)
            u = vp.clip_control(u)
            prev = ag.state
            nxt = integrate(prev, u, vp, sc.dt, sc.physics_substeps)
            moved = nxt.x - prev.x
            if sc.geometry is Geometry.LOOP:
                nxt = replace(nxt, x=nxt.x % sc.track_length)
            ag.state = nxt
            ag.progress += moved
            ag.last_accel = u.a

        self.tick += 1
        collisions = self._detect_collisions()
        for i in self.contexts:
            ag = self.agents[i]
            if not ag.collided and ag.spawn_x + ag.progress >= ag.goal_x:
                ag.finished = True
                ag.finish_tick = self.tick

        terms, rewards, task = self._rewards(collisions, safe_terms)
        done = {i: not a.active for i, a in enumerate(self.agents)}
        record = {
            "tick": self.tick,
            "states": [[a.state.x, a.state.y, a.state.psi, a.state.v] for a in self.agents],
            "actions": {str(i): str(self.actions[a]) for i, a in applied.items()},
            "h": {str(i): h for i, h in h_values.items()},
            "intervened": {str(i): v for i, v in intervened.items()},
            "collisions": {str(i): v for i, v in collisions.items()},
            "rewards": [rewards[i] for i in self.agent_ids],
            "task": [task[i] for i in self.agent_ids],
            "flow": [terms[i].flow for i in self.agent_ids],
            "dest": [terms[i].dest for i in self.agent_ids],
            "coll": [terms[i].coll for i in self.agent_ids],
            "safe": [terms[i].safe for i in self.agent_ids],
            "acting": sorted(applied),
            "finished": [a.finished for a in self.agents],
            "collided": [a.collided for a in self.agents],
        }
        self.records.append(record)

        truncated = self.tick >= sc.episode_len
        # Observed even at the time limit so learners can bootstrap from it.
        self.contexts = self._observe()
        obs = {i: c.obs for i, c in self.contexts.items()}
        info = {
            "intervened": intervened,
            "h": h_values,
            "applied": applied,
            "truncated": truncated,
            "task": task,
        }
        return StepOutcome(obs, rewards, terms, collisions, done, info)

    def _detect_collisions(self) -> Dict[int, List[float]]:
        """Score new disc contacts; colliding agents halt where they are."""
        sc = self.cfg.scenario
        reach = 2.0 * sc.vehicle_radius
        bodies = []
        for i, ag in enumerate(self.agents):
            if not ag.finished:
                s = ag.state
                bodies.append((("agent", i), s.x, s.y, s.v * math.cos(s.psi), s.v * math.sin(s.psi)))
        for k, o in enumerate(self.obstacle_states):
            bodies.append((("obstacle", k), o.x, o.y, 0.0, 0.0))
        events: Dict[int, List[float]] = {}
        touching = set()
        for a in range(len(bodies)):
            for b in range(a):
                ka, xa, ya, vxa, vya = bodies[a]
                kb, xb, yb, vxb, vyb = bodies[b]
                if ka[0] == "obstacle" and kb[0] == "obstacle":
                    continue
                if math.hypot(self.rel_x(xa, xb), ya - yb) >= reach:
                    continue
                pair = (kb, ka)
                touching.add(pair)
                if pair in self.contacts:
                    continue
                intensity = math.hypot(vxa - vxb, vya - vyb)
                for key in (ka, kb):
                    if key[0] == "agent":
                        events.setdefault(key[1], []).append(intensity)
        self.contacts |= touching
        for i in events:
            ag = self.agents[i]
            ag.collided = True
            ag.state = replace(ag.state, v=0.0)
        return events

    def _rewards(self, collisions, safe_terms) -> Tuple[Dict[int, RewardTerms], Dict[int, float], Dict[int, float]]:
        w = self.cfg.rewards
        terms = []
        for i, ag in enumerate(self.agents):
            if ag.finished:
                # Absorbing: out of traffic, destination fully credited.
                terms.append(RewardTerms(0.0, 1.0 / w.interpolate, 0.0, 0.0))
                continue
            coll = collision_reward(collisions.get(i, []), w)
            prox = 0.0
            if w.prox_penalty and ag.active and self.rays(i).min() < w.prox_threshold:
                prox = w.prox_penalty
            x_pos = ag.spawn_x + ag.progress
            terms.append(
                RewardTerms(
                    flow_reward(ag.state.v, w),
                    dest_reward(x_pos, ag.spawn_x, ag.goal_x, w),
                    coll + prox,
                    safe_terms.get(i, 0.0),
                )
            )
        if w.mode == "simple":
            rewards = []
            for i, ag in enumerate(self.agents):
                intensity = sum(collisions.get(i, []))
                progress = terms[i].dest * w.interpolate
                rewards.append(reward_simple(ag.state.v, intensity, progress, w))
            task = [reward_simple(ag.state.v, 0.0, terms[i].dest * w.interpolate, w) for i, ag in enumerate(self.agents)]
        else:
            rewards = reward_decomposed(terms, w)
            task = task_rewards(terms, w)
        ids = self.agent_ids
        return dict(zip(ids, terms)), dict(zip(ids, rewards)), dict(zip(ids, task))

    def channel_trace(self) -> List[dict]:
        return list(self.channel.records) if self.channel is not None and self.channel.records else []


def episode_metrics(records: Sequence[dict], dt: float, episode_len: int, discount_gamma: float) -> Metrics:
    """Summarise one episode trace.

    Collisions count agents newly in contact per tick; the efficiency return
    is the discounted, agent-averaged task reward (no collision or safety
    terms); the intervention rate is over acting agent-ticks.
    """
    collisions = sum(len(r["collisions"]) for r in records)
    n_agents = len(records[0]["finished"]) if records else 0
    finish_ticks: List[Optional[int]] = [None] * n_agents
    for r in records:
        for i, f in enumerate(r["finished"]):
            if f and finish_ticks[i] is None:
                finish_ticks[i] = r["tick"]
    if records and all(t is not None for t in finish_ticks):
        time_s = max(finish_ticks) * dt
    else:
        time_s = episode_len * dt
    eff = 0.0
    for t, r in enumerate(records):
        eff += discount_gamma**t * float(np.mean(r["task"]))
    acting = sum(len(r["acting"]) for r in records)
    interventions = sum(1 for r in records for v in r["intervened"].values() if v)
    flows = [r["flow"][int(i)] for r in records for i in r["acting"]]
    return Metrics(
        collisions=collisions,
        time_s=time_s,
        efficiency_return=eff,
        intervention_rate=interventions / acting if acting else 0.0,
        mean_flow=float(np.mean(flows)) if flows else 0.0,
        finished=sum(t is not None for t in finish_ticks),
    )
