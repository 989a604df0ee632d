"""Discrete high-level actions and the PID reference controller."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

from .dynamics import ControlInput, VehicleParams, VehicleState, normalize_angle


class ActionKind(str, enum.Enum):
    EMERGENCY_STOP = "emergency_stop"
    MAINTAIN = "maintain"
    LANE_LEFT = "lane_left"
    LANE_RIGHT = "lane_right"
    BRAKE = "brake"
    ACCELERATE = "accelerate"


@dataclass(frozen=True, order=True)
class ActionId:
    kind: ActionKind
    level: int = 0

    def __str__(self) -> str:
        return f"{self.kind.value}{self.level or ''}"


def action_space(k_levels: int = 2) -> List[ActionId]:
    """Ordered discrete action set; index 0 is the emergency stop."""
    actions = [
        ActionId(ActionKind.EMERGENCY_STOP),
        ActionId(ActionKind.MAINTAIN),
        ActionId(ActionKind.LANE_LEFT),
        ActionId(ActionKind.LANE_RIGHT),
    ]
    actions += [ActionId(ActionKind.BRAKE, k) for k in range(1, k_levels + 1)]
    actions += [ActionId(ActionKind.ACCELERATE, k) for k in range(1, k_levels + 1)]
    return actions


EMERGENCY_STOP = ActionId(ActionKind.EMERGENCY_STOP)
MAINTAIN = ActionId(ActionKind.MAINTAIN)


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class ActionTarget:
    target_lane: int
    target_speed: float


@dataclass(frozen=True)
class EnvLimits:
    n_lanes: int
    v_min: float
    v_max: float
    speed_step: float = 0.5


def action_to_target(
    action: ActionId,
    current_lane: int,
    current_target_speed: float,
    limits: EnvLimits,
) -> ActionTarget:
    """Resolve a discrete action into a lane and speed set-point.

    Lane 0 is the left-most lane, so ``LANE_LEFT`` decrements the index.
    """
    lane, speed = current_lane, current_target_speed
    kind = action.kind
    if kind is ActionKind.LANE_LEFT:
        lane -= 1
    elif kind is ActionKind.LANE_RIGHT:
        lane += 1
    elif kind is ActionKind.BRAKE:
        speed -= action.level * limits.speed_step
    elif kind is ActionKind.ACCELERATE:
        speed += action.level * limits.speed_step
    elif kind is ActionKind.EMERGENCY_STOP:
        speed = 0.0
    if not 0 <= lane < limits.n_lanes:
        raise InvalidActionError(f"{action} from lane {current_lane} leaves the road")
    speed = min(max(speed, limits.v_min), limits.v_max)
    return ActionTarget(lane, speed)


@dataclass(frozen=True)
class PidGains:
    """Lateral PID on cross-track error plus proportional speed tracking.

    The derivative path acts on the heading error, which is the rate of
    change of the cross-track error per metre travelled. The lateral loop is
    therefore a PD in distance rather than time: with ``kd = 2 sqrt(kp L)``
    it is critically damped at every speed.
    """

    kp: float = 0.3
    ki: float = 0.0
    kd: float = 0.6
    kp_v: float = 1.5
    integral_clamp: float = 0.5

    def __post_init__(self) -> None:
        if min(self.kp, self.ki, self.kd, self.kp_v, self.integral_clamp) < 0:
            raise ValueError("PID gains must be non-negative")


@dataclass(frozen=True)
class LaneGeometry:
    center_y: float
    heading: float = 0.0


@dataclass(frozen=True)
class ControllerMemory:
    integral: float = 0.0
    prev_error: Optional[float] = None


def pid_control(
    state: VehicleState,
    target: ActionTarget,
    lane: LaneGeometry,
    gains: PidGains,
    vp: VehicleParams,
    dt: float,
    memory: ControllerMemory = ControllerMemory(),
) -> Tuple[ControlInput, ControllerMemory]:
    error = state.y - lane.center_y
    heading_error = normalize_angle(state.psi - lane.heading)

    integral = memory.integral + error * dt
    integral = min(max(integral, -gains.integral_clamp), gains.integral_clamp)

    delta = -(gains.kp * error + gains.ki * integral + gains.kd * math.sin(heading_error))
    accel = gains.kp_v * (target.target_speed - state.v)

    u = vp.clip_control(ControlInput(delta, accel))
    return u, ControllerMemory(integral=integral, prev_error=error)


def lane_center(lane: int, n_lanes: int, lane_width: float) -> float:
    """Lateral position of a lane centre; lane 0 is left-most (largest ``y``)."""
    return (n_lanes - 1 - lane) * lane_width


@dataclass
class AgentController:
    """Per-agent lane/speed set-points and PID memory."""

    target: ActionTarget
    memory: ControllerMemory = ControllerMemory()

    def propose(
        self,
        action: ActionId,
        state: VehicleState,
        limits: EnvLimits,
        lane_width: float,
        gains: PidGains,
        vp: VehicleParams,
        dt: float,
    ) -> Tuple[ActionTarget, ControlInput, ControllerMemory]:
        """Reference control for ``action`` without committing it."""
        target = action_to_target(action, self.target.target_lane, self.target.target_speed, limits)
        geometry = LaneGeometry(lane_center(target.target_lane, limits.n_lanes, lane_width))
        u, memory = pid_control(state, target, geometry, gains, vp, dt, self.memory)
        if target.target_lane != self.target.target_lane:
            # Fresh lateral loop for the new lane.
            memory = replace(memory, integral=0.0)
        return target, u, memory

    def commit(self, target: ActionTarget, memory: ControllerMemory) -> None:
        self.target = target
        self.memory = memory
