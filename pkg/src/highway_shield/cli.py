"""Command-line entry points: train, eval, scripted.

Exit codes: 0 success, 2 bad configuration, 3 training diverged (NaN),
4 checkpoint does not match the scenario.

Every flag can also come from an environment variable named
``HIGHWAY_SHIELD_<FLAG>`` (e.g. ``HIGHWAY_SHIELD_SEED=3``); an explicit flag wins.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from typing import Callable, List, Optional, Sequence

from .config import METHODS, build_configs, config_hash, load_config_file, resolved_dict
from .highway import ConfigError, HighwayEnv, SimConfig
from .marl.train import (
    CURVE_FIELDS,
    CheckpointError,
    TrainingAborted,
    curves_as_dicts,
    episode_seed,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .plots import plot_episode_summary, plot_learning_curves, plot_trajectories
from .rollout import EpisodeResult, maintain_chooser, policy_chooser, random_chooser, run_episode

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NAN = 3
EXIT_HASH = 4

ENV_PREFIX = "HIGHWAY_SHIELD_"

log = logging.getLogger("highway_shield")

EPISODE_FIELDS = ["episode", "seed", "collisions", "time_s", "efficiency_return", "intervention_rate", "mean_flow", "finished"]
METRIC_FIELDS = [
    "scenario", "method", "policy", "seed", "config_hash", "episodes",
    "collisions", "time_s", "efficiency_return", "intervention_rate",
]


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _env_default(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name.upper(), default)


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path: str, fieldnames: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fieldnames})


def write_json(path: str, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve(args) -> tuple:
    raw = load_config_file(args.config) if args.config else {"schema_version": 1}
    sim, train_cfg = build_configs(raw, args.method)
    return sim, train_cfg


def cmd_train(args) -> int:
    sim, train_cfg = _resolve(args)
    if args.episodes is not None:
        train_cfg = train_cfg.__class__(**{**asdict(train_cfg), "n_episodes": args.episodes})
    os.makedirs(args.out, exist_ok=True)
    resolved = resolved_dict(sim, train_cfg, args.method, args.seed)
    chash = config_hash(sim)
    write_json(os.path.join(args.out, "resolved_config.json"), resolved)
    meta = {"config_hash": chash, "config": resolved, "seed": args.seed, "method": args.method}

    def progress(row) -> None:
        log.info("episode %d return %.3f collisions %d", row.episode, row.efficiency_return, row.collisions)

    try:
        state, curves = train(sim, train_cfg, args.seed, on_episode=progress)
    except TrainingAborted as exc:
        diag = os.path.join(args.out, "diagnostic_checkpoint.json")
        save_checkpoint(diag, exc.state, {**meta, "aborted": str(exc)})
        _write_curves(args.out, exc.curves, chash, args.seed)
        raise CliError(f"training aborted: {exc} (state saved to {diag})", EXIT_NAN) from exc

    save_checkpoint(os.path.join(args.out, "checkpoint.json"), state, meta)
    rows = _write_curves(args.out, curves, chash, args.seed)
    plot_learning_curves(rows, os.path.join(args.out, "curves.png"))
    print(f"trained {len(curves)} episodes -> {args.out}")
    return EXIT_OK


def _write_curves(out: str, curves, chash: str, seed: int) -> List[dict]:
    rows = curves_as_dicts(curves)
    for r in rows:
        r.update(seed=seed, config_hash=chash)
    write_csv(os.path.join(out, "curves.csv"), CURVE_FIELDS + ["seed", "config_hash"], rows)
    return rows


def _run_batch(
    sim: SimConfig,
    make_chooser: Callable[[HighwayEnv], Callable],
    seed: int,
    n_episodes: int,
    discount_gamma: float,
    workers: int,
) -> List[EpisodeResult]:
    """Independent episodes, one env each, merged by episode index."""

    def one(k: int) -> EpisodeResult:
        env = HighwayEnv(sim)
        return run_episode(env, make_chooser(env), episode_seed(seed, k, stream=1), discount_gamma)

    if workers <= 1:
        return [one(k) for k in range(n_episodes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(n_episodes)))


def _report(args, sim: SimConfig, resolved: dict, results: List[EpisodeResult], policy: str) -> dict:
    os.makedirs(os.path.join(args.out, "traces"), exist_ok=True)
    chash = config_hash(sim)
    write_json(os.path.join(args.out, "resolved_config.json"), resolved)
    rows = []
    for k, res in enumerate(results):
        m = res.metrics
        rows.append(
            {
                "episode": k,
                "seed": episode_seed(args.seed, k, stream=1),
                **{f: getattr(m, f) for f in EPISODE_FIELDS[2:]},
            }
        )
        header = {"type": "header", "episode": k, "seed": rows[-1]["seed"], "config_hash": chash, "config": resolved}
        with open(os.path.join(args.out, "traces", f"episode_{k:03d}.jsonl"), "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in res.records:
                fh.write(json.dumps({"type": "tick", **rec}, sort_keys=True) + "\n")
        if res.channel:
            with open(os.path.join(args.out, "traces", f"channel_{k:03d}.jsonl"), "w") as fh:
                for rec in res.channel:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_csv(os.path.join(args.out, "episodes.csv"), EPISODE_FIELDS + ["config_hash"], [{**r, "config_hash": chash} for r in rows])
    n = len(rows)
    summary = {
        "scenario": sim.scenario.name,
        "method": args.method,
        "policy": policy,
        "seed": args.seed,
        "config_hash": chash,
        "episodes": n,
        "collisions": sum(r["collisions"] for r in rows),
        "time_s": sum(r["time_s"] for r in rows) / n,
        "efficiency_return": sum(r["efficiency_return"] for r in rows) / n,
        "intervention_rate": sum(r["intervention_rate"] for r in rows) / n,
    }
    write_csv(os.path.join(args.out, "metrics.csv"), METRIC_FIELDS, [summary])
    plot_episode_summary(rows, os.path.join(args.out, "summary.png"), f"{args.method} / {policy}")
    plot_trajectories(results[0].records, sim.scenario, os.path.join(args.out, "trajectories.png"))
    print(
        f"{summary['episodes']} episodes: collisions={summary['collisions']} "
        f"time_s={summary['time_s']:.2f} efficiency_return={summary['efficiency_return']:.3f} "
        f"intervention_rate={summary['intervention_rate']:.3f} -> {args.out}"
    )
    return summary


def cmd_eval(args) -> int:
    sim, train_cfg = _resolve(args)
    try:
        policy = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError, CheckpointError) as exc:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {exc}", EXIT_CONFIG) from exc
    expected = config_hash(sim)
    if policy.meta.get("config_hash") != expected:
        raise CliError(
            f"checkpoint config hash {policy.meta.get('config_hash')} does not match scenario hash {expected}",
            EXIT_HASH,
        )
    if len(policy.thetas) != sim.scenario.n_agents:
        raise CliError("checkpoint agent count does not match the scenario", EXIT_HASH)
    resolved = resolved_dict(sim, train_cfg, args.method, args.seed)
    resolved["checkpoint"] = os.path.basename(args.checkpoint)

    def make(env):
        return policy_chooser(env, policy.net, policy.thetas, eps=0.0, greedy=True)

    results = _run_batch(sim, make, args.seed, args.episodes, train_cfg.discount_gamma, args.workers)
    _report(args, sim, resolved, results, "greedy")
    return EXIT_OK


def cmd_scripted(args) -> int:
    sim, train_cfg = _resolve(args)
    resolved = resolved_dict(sim, train_cfg, args.method, args.seed)
    resolved["policy"] = args.policy
    make = {"maintain": maintain_chooser, "random": random_chooser}[args.policy]
    results = _run_batch(sim, make, args.seed, args.episodes, train_cfg.discount_gamma, args.workers)
    _report(args, sim, resolved, results, args.policy)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="highway-shield", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, episodes_default: Optional[int]) -> None:
        p.add_argument("--config", default=_env_default("config"), help="scenario/run JSON file")
        p.add_argument("--method", default=_env_default("method", "rsr-rsmarl"), choices=sorted(METHODS))
        p.add_argument("--seed", type=int, default=int(_env_default("seed", 0)))
        env_eps = _env_default("episodes")
        p.add_argument(
            "--episodes",
            type=int,
            default=int(env_eps) if env_eps is not None else episodes_default,
            help="training episodes (train) or evaluation episodes (eval, scripted)",
        )
        p.add_argument("--out", default=_env_default("out", os.path.join("runs", p.prog.split()[-1])))

    p_train = sub.add_parser("train", help="train policies with the selected method")
    common(p_train, None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint with the greedy policy")
    common(p_eval, 50)
    p_eval.add_argument("--checkpoint", default=_env_default("checkpoint"), required=_env_default("checkpoint") is None)
    p_eval.add_argument("--workers", type=int, default=int(_env_default("workers", 4)))
    p_eval.set_defaults(func=cmd_eval)

    p_script = sub.add_parser("scripted", help="run a non-learned policy through the same stack")
    common(p_script, 50)
    p_script.add_argument("--policy", default=_env_default("policy", "random"), choices=["maintain", "random"])
    p_script.add_argument("--workers", type=int, default=int(_env_default("workers", 4)))
    p_script.set_defaults(func=cmd_scripted)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except ValueError as exc:  # malformed numeric environment override
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
