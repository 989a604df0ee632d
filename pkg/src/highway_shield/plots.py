"""Figures written next to the CSV outputs."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .controllers import lane_center  # noqa: E402
from .highway import ScenarioConfig  # noqa: E402

# Fixed metadata keeps PNG bytes independent of the matplotlib build date.
_PNG_META = {"Software": None}


def plot_learning_curves(rows: Sequence[dict], path: str) -> None:
    ep = [r["episode"] for r in rows]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    panels = [
        ("efficiency_return", "efficiency return"),
        ("mean_flow", "mean flow reward"),
        ("collisions", "collisions"),
        ("mean_lambda", "robustness weight"),
    ]
    for ax, (key, label) in zip(axes.ravel(), panels):
        ax.plot(ep, [r[key] for r in rows], lw=1.2)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    for ax in axes[1]:
        ax.set_xlabel("episode")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_episode_summary(rows: Sequence[dict], path: str, title: str = "") -> None:
    idx = np.arange(len(rows))
    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    axes[0].bar(idx, [r["collisions"] for r in rows], color="tab:red")
    axes[0].set_ylabel("collisions")
    axes[1].bar(idx, [r["intervention_rate"] for r in rows], color="tab:orange")
    axes[1].set_ylabel("intervention rate")
    axes[2].plot(idx, [r["efficiency_return"] for r in rows], marker="o", ms=3)
    axes[2].set_ylabel("efficiency return")
    axes[2].set_xlabel("episode")
    for ax in axes:
        ax.grid(alpha=0.3)
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_trajectories(records: Sequence[dict], scenario: ScenarioConfig, path: str) -> None:
    """Top view of one episode: agent paths, lane centres and obstacles."""
    fig, ax = plt.subplots(figsize=(10, 2.8))
    for k in range(scenario.n_lanes):
        y = lane_center(k, scenario.n_lanes, scenario.lane_width)
        ax.axhline(y, color="0.85", lw=0.8, zorder=0)
    n_agents = len(records[0]["states"]) if records else 0
    for i in range(n_agents):
        xs = np.array([r["states"][i][0] for r in records])
        ys = np.array([r["states"][i][1] for r in records])
        if scenario.geometry.value == "loop":
            # Break the line where the track wraps.
            jumps = np.flatnonzero(np.abs(np.diff(xs)) > 0.5 * scenario.track_length) + 1
            xs = np.insert(xs, jumps, np.nan)
            ys = np.insert(ys, jumps, np.nan)
        ax.plot(xs, ys, lw=1.2, label=f"agent {i}")
    for o in scenario.obstacles:
        y = lane_center(o.lane, scenario.n_lanes, scenario.lane_width)
        ax.add_patch(plt.Circle((o.x, y), scenario.vehicle_radius, color="k"))
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal", adjustable="datalim")
    if n_agents:
        ax.legend(loc="upper left", fontsize=7, ncol=n_agents)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
