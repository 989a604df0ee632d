import csv
import json

import numpy as np
import pytest

from highway_shield import cli
from highway_shield.config import METHODS, build_configs, config_hash, load_config_file
from highway_shield.highway import ConfigError, HighwayEnv
from highway_shield.marl.ppo import TrainerState
from highway_shield.marl.train import TrainingAborted


def _config(tmp_path, name="cfg.json", **scenario):
    raw = {
        "schema_version": 1,
        "scenario": {"episode_len": 60, "obstacles": [{"lane": 1, "x": 5.0}], **scenario},
        "train": {"hidden": [16, 16]},
    }
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_presets_are_flag_combinations():
    raw = {"schema_version": 1}
    flags = {m: build_configs(raw, m) for m in METHODS}
    assert flags["rsr-rsmarl"][0].toggles.shield and flags["rsr-rsmarl"][0].toggles.comm
    assert not flags["rsr-marl"][0].toggles.shield
    assert not flags["nocomm"][0].toggles.comm and flags["nocomm"][0].toggles.shield
    assert flags["nonrobust"][1].lambda_frozen
    assert flags["marl-dr"][0].toggles.obs_noise_sigma > 0


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 2}))
    with pytest.raises(ConfigError):
        load_config_file(str(bad))
    with pytest.raises(ConfigError):
        build_configs({"schema_version": 1, "scenery": {}}, "rsr-rsmarl")
    with pytest.raises(ConfigError):
        build_configs({"schema_version": 1, "scenario": {"n_lanez": 2}}, "rsr-rsmarl")
    with pytest.raises(ConfigError):
        build_configs({"schema_version": 1}, "no-such-method")


def test_hash_tracks_scenario_only():
    a, _ = build_configs({"schema_version": 1}, "rsr-rsmarl")
    b, _ = build_configs({"schema_version": 1}, "rsr-marl")
    c, _ = build_configs({"schema_version": 1, "scenario": {"n_lanes": 2, "n_agents": 2}}, "rsr-rsmarl")
    assert config_hash(a) == config_hash(b) != config_hash(c)


def test_unreadable_config_exit_2(tmp_path, capsys):
    assert cli.main(["scripted", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_train_artifacts_and_determinism(tmp_path):
    cfg = _config(tmp_path)
    for run in ("a", "b"):
        code = cli.main(["train", "--config", cfg, "--seed", "7", "--episodes", "2", "--out", str(tmp_path / run)])
        assert code == 0
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("checkpoint.json", "curves.csv", "curves.png", "resolved_config.json"):
        assert (a / name).exists()
    assert (a / "curves.csv").read_bytes() == (b / "curves.csv").read_bytes()
    rows = _rows(a / "curves.csv")
    assert len(rows) == 2
    assert {"episode", "efficiency_return", "collisions", "mean_lambda", "seed", "config_hash"} <= set(rows[0])
    resolved = json.loads((a / "resolved_config.json").read_text())
    assert resolved["seed"] == 7 and resolved["method"] == "rsr-rsmarl"


def test_eval_roundtrip_and_hash_mismatch(tmp_path):
    cfg = _config(tmp_path)
    train_out = tmp_path / "t"
    assert cli.main(["train", "--config", cfg, "--episodes", "1", "--out", str(train_out)]) == 0
    ck = str(train_out / "checkpoint.json")
    outs = []
    for run in ("e1", "e2"):
        out = tmp_path / run
        assert cli.main(["eval", "--config", cfg, "--checkpoint", ck, "--episodes", "3", "--out", str(out)]) == 0
        outs.append(out)
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert (outs[0] / "episodes.csv").read_bytes() == (outs[1] / "episodes.csv").read_bytes()
    for name in ("summary.png", "trajectories.png", "traces/episode_000.jsonl", "traces/channel_000.jsonl"):
        assert (outs[0] / name).exists()
    header = json.loads((outs[0] / "traces/episode_000.jsonl").read_text().splitlines()[0])
    assert header["type"] == "header" and header["config"]["seed"] == 0
    summary = _rows(outs[0] / "metrics.csv")[0]
    assert summary["collisions"] == "0"

    other = _config(tmp_path, "other.json", n_lanes=4)
    code = cli.main(["eval", "--config", other, "--checkpoint", ck, "--episodes", "1", "--out", str(tmp_path / "x")])
    assert code == 4


def test_marl_dr_not_safer_than_shielded(tmp_path):
    cfg = _config(tmp_path)
    assert cli.main(["train", "--config", cfg, "--episodes", "1", "--out", str(tmp_path / "t")]) == 0
    ck = str(tmp_path / "t" / "checkpoint.json")
    counts = {}
    for method in ("rsr-rsmarl", "marl-dr"):
        out = tmp_path / method
        args = ["eval", "--config", cfg, "--checkpoint", ck, "--method", method, "--episodes", "5", "--out", str(out)]
        assert cli.main(args) == 0
        counts[method] = int(_rows(out / "metrics.csv")[0]["collisions"])
    assert counts["rsr-rsmarl"] == 0
    assert counts["marl-dr"] >= counts["rsr-rsmarl"]


def test_bad_checkpoint_exit_2(tmp_path):
    bogus = tmp_path / "ck.json"
    bogus.write_text(json.dumps({"format": "other"}))
    assert cli.main(["eval", "--checkpoint", str(bogus), "--episodes", "1", "--out", str(tmp_path / "o")]) == 2


def test_nan_abort_exit_3(tmp_path, monkeypatch):
    def boom(sim, cfg, seed, on_episode=None):
        env = HighwayEnv(sim)
        n = sim.scenario.n_agents
        state = TrainerState.create(env.obs_dim, n * (env.obs_dim + 1), env.n_actions, n, cfg, np.random.default_rng(0))
        raise TrainingAborted("non-finite loss", state, [])

    monkeypatch.setattr(cli, "train", boom)
    out = tmp_path / "o"
    assert cli.main(["train", "--config", _config(tmp_path), "--episodes", "1", "--out", str(out)]) == 3
    assert (out / "diagnostic_checkpoint.json").exists()


@pytest.mark.parametrize(
    "method,shield_collides",
    [("rsr-rsmarl", False), ("rsr-marl", True)],
)
def test_scripted_maintain_into_obstacle(tmp_path, method, shield_collides):
    cfg = _config(
        tmp_path, n_lanes=1, n_agents=1, spawns=[{"lane": 0, "x": 0.0}], obstacles=[{"lane": 0, "x": 5.0}],
        init_target_speeds=[2.0],
    )
    out = tmp_path / method
    args = ["scripted", "--config", cfg, "--method", method, "--policy", "maintain", "--episodes", "2", "--out", str(out)]
    assert cli.main(args) == 0
    row = _rows(out / "metrics.csv")[0]
    assert (int(row["collisions"]) >= 1) == shield_collides
    if method == "rsr-marl":
        assert float(row["intervention_rate"]) == 0.0


def test_scripted_random_shield_on(tmp_path):
    out = tmp_path / "r"
    assert cli.main(["scripted", "--config", _config(tmp_path), "--episodes", "6", "--out", str(out)]) == 0
    assert _rows(out / "metrics.csv")[0]["collisions"] == "0"


def test_env_var_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("HIGHWAY_SHIELD_SEED", "5")
    monkeypatch.setenv("HIGHWAY_SHIELD_EPISODES", "2")
    out = tmp_path / "o"
    assert cli.main(["scripted", "--config", _config(tmp_path), "--out", str(out)]) == 0
    rows = _rows(out / "episodes.csv")
    assert len(rows) == 2
    assert json.loads((out / "resolved_config.json").read_text())["seed"] == 5
    # explicit flag wins
    assert cli.main(["scripted", "--config", _config(tmp_path), "--seed", "1", "--out", str(out)]) == 0
    assert json.loads((out / "resolved_config.json").read_text())["seed"] == 1
    monkeypatch.setenv("HIGHWAY_SHIELD_SEED", "abc")
    assert cli.main(["scripted", "--out", str(out)]) == 2


def test_workers_do_not_change_results(tmp_path):
    cfg = _config(tmp_path)
    for w in ("1", "3"):
        assert cli.main(["scripted", "--config", cfg, "--episodes", "3", "--workers", w, "--out", str(tmp_path / w)]) == 0
    assert (tmp_path / "1" / "episodes.csv").read_bytes() == (tmp_path / "3" / "episodes.csv").read_bytes()


def test_shipped_configs_load():
    import pathlib

    root = pathlib.Path(__file__).resolve().parent.parent / "configs"
    files = sorted(root.glob("*.json"))
    assert files
    for f in files:
        build_configs(load_config_file(str(f)), "rsr-rsmarl")
