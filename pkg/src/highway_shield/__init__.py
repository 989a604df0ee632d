"""Multi-agent highway simulator with a barrier-function safety shield,
delayed V2V communication and a robust multi-agent PPO trainer."""
from .dynamics import ControlInput, CorruptStateError, VehicleParams, VehicleState, bicycle_derivative, step
from .shield import (
    BarrierForm,
    BarrierParams,
    Neighbor,
    QPResult,
    SafeActionReport,
    barrier_value,
    cbf_constraint_coeffs,
    safe_action_set,
    solve_safety_qp,
)

__version__ = "0.1.0"

__all__ = [
    "BarrierForm",
    "BarrierParams",
    "ControlInput",
    "CorruptStateError",
    "Neighbor",
    "QPResult",
    "SafeActionReport",
    "VehicleParams",
    "VehicleState",
    "barrier_value",
    "bicycle_derivative",
    "cbf_constraint_coeffs",
    "safe_action_set",
    "solve_safety_qp",
    "step",
]
