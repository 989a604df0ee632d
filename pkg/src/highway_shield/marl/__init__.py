"""Robust multi-agent PPO with a worst-case Q critic."""
from .nets import Adam, MlpNet
from .ppo import (
    EmptyMemoryError,
    NonFiniteLossError,
    RolloutMemory,
    TrainConfig,
    TrainerState,
    critic_loss,
    gae,
    masked_softmax,
    policy_loss,
    ppo_update,
    select_action,
    worst_q_loss,
    worst_q_targets,
)

__all__ = [
    "Adam",
    "EmptyMemoryError",
    "MlpNet",
    "NonFiniteLossError",
    "RolloutMemory",
    "TrainConfig",
    "TrainerState",
    "critic_loss",
    "gae",
    "masked_softmax",
    "policy_loss",
    "ppo_update",
    "select_action",
    "worst_q_loss",
    "worst_q_targets",
]
