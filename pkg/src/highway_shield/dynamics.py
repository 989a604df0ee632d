"""Kinematic bicycle model and fixed-step integration.

State is ``(x, y, psi, v)`` in a lane-aligned frame: ``x`` runs along the road,
``y`` points to the left, ``psi`` is measured from the road direction.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np


class CorruptStateError(ValueError):
    """Raised when a state or control contains non-finite values."""


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    psi: float
    v: float


@dataclass(frozen=True)
class ControlInput:
    delta: float
    a: float


@dataclass(frozen=True)
class VehicleParams:
    """Physical limits of a 1/10th-scale car.

    Args:
        wheelbase_L: Distance between axles (m).
        v_min, v_max: Speed bounds (m/s).
        a_min, a_max: Acceleration bounds (m/s^2); ``a_min`` is the hardest braking.
        delta_max: Steering bound (rad).
    """

    wheelbase_L: float = 0.3
    v_min: float = 0.0
    v_max: float = 2.5
    a_min: float = -2.0
    a_max: float = 1.0
    delta_max: float = 0.4

    def __post_init__(self) -> None:
        if not self.wheelbase_L > 0:
            raise ValueError("wheelbase_L must be positive")
        if self.v_min < 0 or self.v_max <= self.v_min:
            raise ValueError("need 0 <= v_min < v_max")
        if not self.a_min < 0 < self.a_max:
            raise ValueError("need a_min < 0 < a_max")
        if not self.delta_max > 0:
            raise ValueError("delta_max must be positive")

    def clip_control(self, u: ControlInput) -> ControlInput:
        return ControlInput(
            delta=min(max(u.delta, -self.delta_max), self.delta_max),
            a=min(max(u.a, self.a_min), self.a_max),
        )


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def bicycle_derivative(
    state: VehicleState, u: ControlInput, p: VehicleParams
) -> Tuple[float, float, float, float]:
    """Return ``(dx, dy, dpsi, dv)`` of the kinematic bicycle model."""
    return (
        state.v * math.cos(state.psi),
        state.v * math.sin(state.psi),
        state.v / p.wheelbase_L * math.tan(u.delta),
        u.a,
    )


def _check_finite(*values: float) -> None:
    for value in values:
        if not math.isfinite(value):
            raise CorruptStateError(f"non-finite value in vehicle state/control: {value!r}")


@functools.lru_cache(maxsize=8)
def _ramp(n: int) -> np.ndarray:
    out = np.arange(n, dtype=float)
    out.flags.writeable = False
    return out


def step(
    state: VehicleState,
    u: ControlInput,
    p: VehicleParams,
    dt: float,
    substeps: int = 1,
) -> VehicleState:
    """Advance ``state`` by ``dt`` seconds with forward Euler.

    The control is held constant over the interval. ``substeps`` splits the
    interval into equal Euler steps; speed is clamped to ``[v_min, v_max]``
    and heading wrapped after every sub-step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    _check_finite(state.x, state.y, state.psi, state.v, u.delta, u.a)

    h = dt / substeps
    # With the control frozen the Euler speeds form a clipped arithmetic
    # sequence, so the recursion vectorizes: headings are a running sum of
    # speeds and positions a sum over the sub-step headings.
    v1 = min(max(state.v + h * u.a, p.v_min), p.v_max)
    speeds = np.empty(substeps + 1)
    speeds[0] = state.v
    speeds[1:] = _ramp(substeps) * (h * u.a)
    speeds[1:] += v1
    if not p.v_min <= speeds[-1] <= p.v_max:
        np.clip(speeds[1:], p.v_min, p.v_max, out=speeds[1:])
    seg = h * speeds[:-1]
    travelled = np.cumsum(seg)
    yaw_gain = math.tan(u.delta) / p.wheelbase_L
    psis = state.psi + yaw_gain * (travelled - seg)
    x = state.x + float(seg @ np.cos(psis))
    y = state.y + float(seg @ np.sin(psis))
    psi = state.psi + yaw_gain * float(travelled[-1])
    v = float(speeds[-1])
    psi = normalize_angle(psi)
    _check_finite(x, y, psi, v)
    return VehicleState(x, y, psi, v)
