
import numpy as np
import pytest

from highway_shield.controllers import (
    EMERGENCY_STOP,
    MAINTAIN,
    ActionId,
    ActionKind,
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
from highway_shield.dynamics import ControlInput, VehicleParams, VehicleState, step

VP = VehicleParams()
LIM = EnvLimits(n_lanes=3, v_min=0.0, v_max=3.0, speed_step=0.5)
W = 0.6


def test_action_space_layout():
    acts = action_space(2)
    assert len(acts) == 8
    assert acts[0] == EMERGENCY_STOP and acts[1] == MAINTAIN
    assert [a.kind for a in acts[4:]] == [ActionKind.BRAKE] * 2 + [ActionKind.ACCELERATE] * 2


def test_maintain():
    assert action_to_target(MAINTAIN, 1, 2.0, LIM) == ActionTarget(1, 2.0)


def test_lane_left():
    assert action_to_target(ActionId(ActionKind.LANE_LEFT), 1, 2.0, LIM) == ActionTarget(0, 2.0)


def test_lane_right():
    assert action_to_target(ActionId(ActionKind.LANE_RIGHT), 1, 2.0, LIM) == ActionTarget(2, 2.0)


def test_accelerate_clamped():
    assert action_to_target(ActionId(ActionKind.ACCELERATE, 2), 1, 2.0, LIM).target_speed == 3.0


def test_brake_clamped_and_stop():
    assert action_to_target(ActionId(ActionKind.BRAKE, 2), 1, 0.5, LIM).target_speed == 0.0
    assert action_to_target(ActionId(ActionKind.BRAKE, 1), 1, 2.0, LIM).target_speed == 1.5
    assert action_to_target(EMERGENCY_STOP, 2, 2.0, LIM) == ActionTarget(2, 0.0)


def test_invalid_lane_change():
    with pytest.raises(InvalidActionError):
        action_to_target(ActionId(ActionKind.LANE_LEFT), 0, 1.0, LIM)
    with pytest.raises(InvalidActionError):
        action_to_target(ActionId(ActionKind.LANE_RIGHT), 2, 1.0, LIM)


def test_lane_centres():
    assert [lane_center(k, 3, W) for k in range(3)] == pytest.approx([1.2, 0.6, 0.0])


def test_on_centerline_zero_control():
    u, _ = pid_control(VehicleState(0, 0.6, 0, 1.0), ActionTarget(1, 1.0), LaneGeometry(0.6), PidGains(), VP, 0.1)
    assert u == ControlInput(0.0, 0.0)


def test_proportional_sign():
    gains = PidGains(kp=1.0, ki=0.0, kd=0.0)
    u, _ = pid_control(VehicleState(0, 0.7, 0, 1.0), ActionTarget(1, 1.0), LaneGeometry(0.6), gains, VP, 0.1)
    assert u.delta < 0


def test_zero_gains_zero_output():
    gains = PidGains(0.0, 0.0, 0.0, 0.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = VehicleState(0, rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(0, 2.5))
        u, _ = pid_control(s, ActionTarget(0, rng.uniform(0, 2.5)), LaneGeometry(0.0), gains, VP, 0.1,
                           ControllerMemory(rng.uniform(-0.5, 0.5)))
        assert u == ControlInput(0.0, 0.0)


def test_output_within_bounds():
    rng = np.random.default_rng(1)
    gains = PidGains(kp=5.0, ki=2.0, kd=3.0, kp_v=10.0)
    for _ in range(200):
        s = VehicleState(0, rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(0, 2.5))
        u, mem = pid_control(s, ActionTarget(0, rng.uniform(0, 2.5)), LaneGeometry(0.0), gains, VP, 0.1)
        assert abs(u.delta) <= VP.delta_max
        assert VP.a_min <= u.a <= VP.a_max
        assert abs(mem.integral) <= gains.integral_clamp


def test_deterministic():
    s = VehicleState(0, 0.3, 0.05, 1.2)
    args = (s, ActionTarget(0, 2.0), LaneGeometry(1.2), PidGains(ki=0.1), VP, 0.1, ControllerMemory(0.1, 0.2))
    assert pid_control(*args) == pid_control(*args)


def test_gains_must_be_non_negative():
    with pytest.raises(ValueError):
        PidGains(kp=-1)


def _lane_change(speed, seconds, y0=0.6, y_target=1.2):
    """Closed loop at constant speed; returns cross-track error to the target lane per tick."""
    s = VehicleState(0, y0, 0, speed)
    mem = ControllerMemory()
    errs = []
    for _ in range(round(seconds / 0.1)):
        u, mem = pid_control(s, ActionTarget(0, speed), LaneGeometry(y_target), PidGains(), VP, 0.1, mem)
        s = step(s, u, VP, 0.1, 100)
        errs.append(s.y - y_target)
    return np.array(errs)


def test_step_response_lane_change():
    # lane 1 centre to lane 0 target at 2 m/s
    errs = _lane_change(2.0, 6.0)
    settle = next(k for k in range(len(errs)) if np.all(np.abs(errs[k:]) < 0.02))
    assert (settle + 1) * 0.1 <= 4.0
    overshoot = max(0.0, errs.max())  # error starts negative (below target)
    assert overshoot < 0.2 * W


def test_lane_keeping_decay_is_monotone():
    for speed in (1.0, 2.0):
        errs = np.abs(_lane_change(speed, 8.0, y0=0.05, y_target=0.0))
        tail = errs[5:]  # after the first 0.5 s
        assert np.all(np.diff(tail) <= 1e-12)
        assert tail[-1] < 0.01


def test_agent_controller_resets_integral_on_lane_change():
    ctrl = AgentController(ActionTarget(1, 1.0), ControllerMemory(0.3, 0.1))
    s = VehicleState(0, 0.6, 0, 1.0)
    target, _, mem = ctrl.propose(ActionId(ActionKind.LANE_LEFT), s, LIM, W, PidGains(ki=0.5), VP, 0.1)
    assert target == ActionTarget(0, 1.0)
    assert mem.integral == 0.0
    assert ctrl.target == ActionTarget(1, 1.0)  # propose does not commit
    ctrl.commit(target, mem)
    assert ctrl.target == target
