"""JSON run configuration, method presets and config hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Tuple

from .controllers import PidGains
from .dynamics import VehicleParams
from .highway import ConfigError, RewardWeights, ScenarioConfig, SimConfig, Toggles
from .marl.ppo import TrainConfig
from .shield import BarrierParams

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MethodPreset:
    shield: bool
    comm: bool
    lambda_frozen: bool = False
    obs_noise_sigma: float = 0.0


# Named methods only switch these flags; delay, dropout and the rest come from the config file.
METHODS: Dict[str, MethodPreset] = {
    "rsr-rsmarl": MethodPreset(shield=True, comm=True),
    "rsr-marl": MethodPreset(shield=False, comm=True),
    "nocomm": MethodPreset(shield=True, comm=False),
    "nonrobust": MethodPreset(shield=False, comm=True, lambda_frozen=True),
    "marl-dr": MethodPreset(shield=False, comm=True, lambda_frozen=True, obs_noise_sigma=0.05),
}


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    return raw


def build_configs(raw: dict, method: str) -> Tuple[SimConfig, TrainConfig]:
    """Resolve a config dict plus a named method into simulator and trainer settings."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    allowed = {"schema_version", "scenario", "vehicle", "barrier", "pid", "rewards", "toggles", "train", "sim"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    preset = METHODS[method]
    vehicle = _build(VehicleParams, raw.get("vehicle"), "vehicle")
    try:
        barrier = BarrierParams.for_vehicle(vehicle, **(raw.get("barrier") or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid barrier: {exc}") from exc
    toggles = _build(Toggles, raw.get("toggles"), "toggles")
    toggles = replace(
        toggles,
        shield=preset.shield,
        comm=preset.comm,
        obs_noise_sigma=preset.obs_noise_sigma,
        comm_noise_sigma=max(toggles.comm_noise_sigma, preset.obs_noise_sigma),
    )
    sim_extra = raw.get("sim") or {}
    if set(sim_extra) - {"speed_step", "k_levels"}:
        raise ConfigError("sim accepts only speed_step and k_levels")
    sim = SimConfig(
        scenario=_build(ScenarioConfig, raw.get("scenario"), "scenario"),
        vehicle=vehicle,
        barrier=barrier,
        pid=_build(PidGains, raw.get("pid"), "pid"),
        rewards=_build(RewardWeights, raw.get("rewards"), "rewards"),
        toggles=toggles,
        **sim_extra,
    )
    train = _build(TrainConfig, raw.get("train"), "train")
    if preset.lambda_frozen:
        train = replace(train, lambda_frozen=True)
    return sim, train


def resolved_dict(sim: SimConfig, train: TrainConfig, method: str, seed: int) -> dict:
    """JSON-ready snapshot of everything a run depends on."""
    return json.loads(
        json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "method": method,
                "seed": seed,
                "scenario": asdict(sim.scenario),
                "vehicle": asdict(sim.vehicle),
                "barrier": asdict(sim.barrier),
                "pid": asdict(sim.pid),
                "rewards": asdict(sim.rewards),
                "toggles": asdict(sim.toggles),
                "sim": {"speed_step": sim.speed_step, "k_levels": sim.k_levels},
                "train": asdict(train),
            }
        )
    )


def config_hash(sim: SimConfig) -> str:
    """Hash of the settings a trained policy is tied to: world layout and action set."""
    payload = {"scenario": asdict(sim.scenario), "k_levels": sim.k_levels, "speed_step": sim.speed_step}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
