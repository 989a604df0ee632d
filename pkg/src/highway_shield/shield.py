"""Control-barrier-function safety filter.

Two headway barriers are supported:

* quadratic: ``h = (x_tar - x_ego) - (c1 * v_ego + c2 * (v_ego**2 - v_tar**2))``
* linear:    ``h = x_tar - x_ego - c * v_ego - delta_gap``

Only the ego's longitudinal acceleration enters the barrier derivative, so the
filtering QP ``min 1/2 |u - u_ref|^2  s.t.  g_a * a >= rhs, a in box`` has a
closed-form solution: steering passes through, acceleration is projected onto
the constraint half-line and clipped to the box.

``cbf_constraint_coeffs`` gives the continuous-time row ``dh/dt >= -gamma h``.
With ``BarrierParams.sampled`` set, ``safe_action_set`` instead enforces the
one-step condition ``h(x[k+1]) >= (1 - gamma dt) h(x[k])`` under a zero-order
hold, which is what keeps ``h`` non-negative at the 0.1 s control rate; it
tends to the continuous row as ``dt -> 0``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

from .dynamics import ControlInput, VehicleParams, VehicleState

INTERVENTION_TOL = 1e-9

# Encodes an empty half-line, 0 * a >= 1.
INFEASIBLE = (0.0, 1.0)


class BarrierForm(str, enum.Enum):
    QUADRATIC = "quadratic"
    LINEAR = "linear"


@dataclass(frozen=True)
class BarrierParams:
    form: BarrierForm = BarrierForm.QUADRATIC
    c1: float = 0.8
    c2: float = 0.25
    c: float = 0.8
    delta_gap: float = 0.1
    cbf_gamma: float = 2.0
    sampled: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "form", BarrierForm(self.form))
        if min(self.c1, self.c2, self.c, self.delta_gap) < 0:
            raise ValueError("barrier gains must be non-negative")
        if not self.cbf_gamma > 0:
            raise ValueError("cbf_gamma must be positive")

    @classmethod
    def for_vehicle(cls, vp: VehicleParams, **overrides) -> "BarrierParams":
        """Defaults with ``c2 = 1 / (2 |a_min|)``, the stopping-distance coefficient."""
        kwargs = {"c2": 0.5 / abs(vp.a_min)}
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass(frozen=True)
class QPResult:
    feasible: bool
    u_star: ControlInput
    constraint_slack: float
    intervened: bool
    h: float = math.inf


@dataclass
class SafeActionReport:
    results: Dict[Hashable, QPResult]

    @property
    def safe_set(self) -> List[Hashable]:
        return [a for a, r in self.results.items() if r.feasible]


@dataclass(frozen=True)
class Neighbor:
    """Another road user as seen by the shield.

    ``state.x`` is expressed in the ego's arc-length frame (centre to centre).
    ``lanes`` lists the lane indices the neighbour's footprint overlaps and
    ``in_corridor`` marks it as laterally overlapping the ego itself.
    ``accel`` is the acceleration the shield assumes for it over the next tick.
    ``follower_state`` optionally replaces ``state`` when the neighbour is
    checked as the vehicle behind, so a stale report can be bounded from the
    other side.
    """

    state: VehicleState
    lanes: frozenset
    in_corridor: bool = False
    accel: float = 0.0
    follower_state: Optional[VehicleState] = None

    @property
    def rear_state(self) -> VehicleState:
        return self.state if self.follower_state is None else self.follower_state


def barrier_value(ego: VehicleState, tar: VehicleState, p: BarrierParams) -> float:
    gap = tar.x - ego.x
    if p.form is BarrierForm.QUADRATIC:
        return gap - (p.c1 * ego.v + p.c2 * (ego.v * ego.v - tar.v * tar.v))
    return gap - p.c * ego.v - p.delta_gap


def cbf_constraint_coeffs(
    ego: VehicleState,
    tar: VehicleState,
    p: BarrierParams,
    tar_accel: float = 0.0,
) -> Tuple[float, float]:
    """Coefficients ``(g_a, rhs)`` of the constraint ``g_a * a_ego >= rhs``.

    ``tar_accel`` enters through the explicit time derivative of ``h``; the
    default of zero treats the target as unaccelerated.
    """
    h = barrier_value(ego, tar, p)
    drift = tar.v - ego.v
    if p.form is BarrierForm.QUADRATIC:
        g_a = -(p.c1 + 2.0 * p.c2 * ego.v)
        drift += 2.0 * p.c2 * tar.v * tar_accel
    else:
        g_a = -p.c
    rhs = -p.cbf_gamma * h - drift
    return g_a, rhs


def euler_longitudinal(v: float, a: float, vp: VehicleParams, dt: float, substeps: int) -> Tuple[float, float]:
    """Closed form of ``dynamics.step`` along a straight line: ``(dx, v_next)``.

    Sums the Euler recursion with the speed clamp instead of looping.
    """
    h = dt / substeps
    if a == 0.0:
        return dt * v, v
    limit = vp.v_min if a < 0 else vp.v_max
    # Sub-steps whose starting speed is still unsaturated.
    m = min(substeps, int(math.floor((limit - v) / (h * a))) + 1)
    m = max(m, 0)
    dx = h * (m * v + h * a * m * (m - 1) / 2.0 + (substeps - m) * limit)
    v_next = v + substeps * h * a
    v_next = max(v_next, limit) if a < 0 else min(v_next, limit)
    return dx, v_next


def sampled_constraint_coeffs(
    ego: VehicleState,
    tar: VehicleState,
    p: BarrierParams,
    vp: VehicleParams,
    dt: float,
    substeps: int = 1,
    tar_accel: float = 0.0,
) -> Tuple[float, float]:
    """One-step barrier condition as an upper bound ``-a >= -a_bound``.

    The ego's next state is predicted exactly for the Euler integrator with
    ``substeps`` sub-steps (the acceleration box keeps speed off its clamps);
    the target is rolled forward with ``tar_accel`` held.
    """
    h = barrier_value(ego, tar, p)
    decay = 1.0 - min(1.0, p.cbf_gamma * dt)
    # Euler sub-stepping shortens the constant-acceleration displacement term.
    kappa = 0.5 * dt * dt * (1.0 - 1.0 / substeps)
    tar_dx, tar_v = euler_longitudinal(tar.v, tar_accel, vp, dt, substeps)
    base = tar.x + tar_dx - ego.x - ego.v * dt

    if p.form is BarrierForm.LINEAR:
        # h' = base - kappa a - c (v + a dt) - delta_gap
        slope = kappa + p.c * dt
        bound = (base - p.c * ego.v - p.delta_gap - decay * h) / slope
        return -1.0, -bound

    # h' = const - lin a - quad a^2, decreasing on the admissible box.
    quad = p.c2 * dt * dt
    lin = kappa + p.c1 * dt + 2.0 * p.c2 * ego.v * dt
    const = base - p.c1 * ego.v - p.c2 * (ego.v * ego.v - tar_v * tar_v)
    slack = const - decay * h
    if quad == 0.0:
        return -1.0, -slack / lin
    disc = lin * lin + 4.0 * quad * slack
    if disc < 0.0:
        return INFEASIBLE
    bound = 2.0 * slack / (lin + math.sqrt(disc))
    return -1.0, -bound


def acceleration_box(state: VehicleState, vp: VehicleParams, dt: float) -> Tuple[float, float]:
    """Acceleration bounds tightened so next-tick speed stays in ``[v_min, v_max]``."""
    lo = max(vp.a_min, (vp.v_min - state.v) / dt)
    hi = min(vp.a_max, (vp.v_max - state.v) / dt)
    return lo, hi


def solve_safety_qp(
    u_ref: ControlInput,
    coeffs: Tuple[float, float],
    state: VehicleState,
    p: VehicleParams,
    dt: float = 0.1,
) -> QPResult:
    g_a, rhs = coeffs
    lo, hi = acceleration_box(state, p, dt)
    # Interval of accelerations allowed by the half-line g_a * a >= rhs.
    c_lo, c_hi = -math.inf, math.inf
    if g_a > 0:
        c_lo = rhs / g_a
    elif g_a < 0:
        c_hi = rhs / g_a
    elif rhs > 0:
        c_lo, c_hi = math.inf, -math.inf
    f_lo, f_hi = max(lo, c_lo), min(hi, c_hi)

    if f_lo > f_hi:
        return QPResult(
            feasible=False,
            u_star=ControlInput(u_ref.delta, p.a_min),
            constraint_slack=g_a * p.a_min - rhs,
            intervened=True,
        )

    a_star = min(max(u_ref.a, f_lo), f_hi)
    intervened = abs(a_star - u_ref.a) > INTERVENTION_TOL
    if not intervened:
        a_star = u_ref.a
    return QPResult(
        feasible=True,
        u_star=ControlInput(u_ref.delta, a_star),
        constraint_slack=g_a * a_star - rhs,
        intervened=intervened,
    )


def _upper_bound(coeffs: Tuple[float, float]) -> float:
    g_a, rhs = coeffs
    if g_a < 0:
        return rhs / g_a
    if g_a == 0:
        return -math.inf if rhs > 0 else math.inf
    # Lower bounds never arise from headway barriers with non-negative gains.
    raise ValueError("expected a non-positive acceleration coefficient")


def _leader(ego: VehicleState, candidates: Sequence[Neighbor]) -> Optional[Neighbor]:
    # A neighbour whose position bounds straddle the ego counts as both leader and follower.
    ahead = [n for n in candidates if n.rear_state.x >= ego.x]
    return min(ahead, key=lambda n: n.state.x) if ahead else None


def _follower(ego: VehicleState, candidates: Sequence[Neighbor]) -> Optional[Neighbor]:
    behind = [n for n in candidates if n.state.x < ego.x]
    return max(behind, key=lambda n: n.rear_state.x) if behind else None


def _shifted(state: VehicleState, dx: float) -> VehicleState:
    return VehicleState(state.x + dx, state.y, state.psi, state.v)


def safe_action_set(
    agent_view: Mapping[Hashable, Tuple[ControlInput, int]],
    ego: VehicleState,
    neighbors: Sequence[Neighbor],
    p: BarrierParams,
    vp: VehicleParams,
    current_lanes: frozenset = frozenset(),
    standoff: float = 0.0,
    dt: float = 0.1,
    substeps: int = 1,
    yield_to: Sequence[Neighbor] = (),
) -> SafeActionReport:
    """Evaluate every candidate action through the CBF-QP.

    Args:
        agent_view: action -> (reference control, destination lane).
        ego: ego state in its own arc-length frame.
        neighbors: surrounding vehicles and obstacles (see ``Neighbor``).
        current_lanes: lanes the ego footprint currently overlaps. An action
            whose destination differs from this set is a lane change and
            must also clear the destination lane's leader and follower
            with ``h >= 0``.
        standoff: centre distance treated as contact; headways are measured
            from it.
        dt, substeps: control period and integrator sub-steps, used by the
            sampled-data constraint.
        yield_to: vehicles that may merge into a lane at the same time as the
            ego. They only enter the lane-change leader/follower checks.

    Returns:
        One ``QPResult`` per action. Its ``h`` field is the smallest barrier
        value over the leaders that constrain the action.
    """
    corridor_lead = _leader(ego, [n for n in neighbors if n.in_corridor])
    cache: Dict[int, Tuple[float, Tuple[float, float]]] = {}

    def constraint(lead: Neighbor) -> Tuple[float, Tuple[float, float]]:
        key = id(lead)
        if key not in cache:
            target = _shifted(lead.state, -standoff)
            h = barrier_value(ego, target, p)
            if p.sampled:
                coeffs = sampled_constraint_coeffs(ego, target, p, vp, dt, substeps, lead.accel)
            else:
                coeffs = cbf_constraint_coeffs(ego, target, p, lead.accel)
            cache[key] = (h, coeffs)
        return cache[key]

    def lane_terms(dest_lane: int) -> Tuple[float, Optional[Tuple[float, float]], bool]:
        in_dest = [n for n in neighbors if dest_lane in n.lanes]
        dest_lead = _leader(ego, in_dest)

        h_min = math.inf
        binding = None
        for lead in (dest_lead, corridor_lead):
            if lead is None:
                continue
            h, coeffs = constraint(lead)
            h_min = min(h_min, h)
            if binding is None or _upper_bound(coeffs) < _upper_bound(binding):
                binding = coeffs

        lane_change_ok = True
        if current_lanes != frozenset({dest_lane}):
            merging = in_dest + [n for n in yield_to if dest_lane in n.lanes]
            lead = _leader(ego, merging)
            if lead is not None and constraint(lead)[0] < 0:
                lane_change_ok = False
            follow = _follower(ego, merging)
            # Roles swap: the follower is the ego of this barrier.
            if follow is not None and barrier_value(follow.rear_state, _shifted(ego, -standoff), p) < 0:
                lane_change_ok = False
        return h_min, binding, lane_change_ok

    per_lane: Dict[int, Tuple[float, Optional[Tuple[float, float]], bool]] = {}
    results: Dict[Hashable, QPResult] = {}
    for action, (u_ref, dest_lane) in agent_view.items():
        if dest_lane not in per_lane:
            per_lane[dest_lane] = lane_terms(dest_lane)
        h_min, binding, lane_change_ok = per_lane[dest_lane]

        if binding is None:
            res = QPResult(True, u_ref, math.inf, False)
        else:
            res = solve_safety_qp(u_ref, binding, ego, vp, dt)
        if not lane_change_ok:
            res = QPResult(False, ControlInput(u_ref.delta, vp.a_min), res.constraint_slack, True)
        results[action] = QPResult(res.feasible, res.u_star, res.constraint_slack, res.intervened, h_min)
    return SafeActionReport(results)
