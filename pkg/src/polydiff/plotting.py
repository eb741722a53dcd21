"""Figure builders for the experiment reports.

Three panels per game, mirroring the structure of the report runs: the
offline dataset scatter colored by reward, policy-parameter paths over the
reward landscape, and return-versus-update curves.  Figures are written as
SVG with deterministic metadata so reruns produce stable files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .games import GameSpec, OfflineDataset, reward_values
from .marl import StepRecord

__all__ = [
    "fig_dataset_scatter",
    "fig_policy_paths",
    "fig_return_curves",
    "save_figure",
]

VARIANT_STYLE = {
    "baseline": dict(color="tab:gray", label="baseline"),
    "uncond": dict(color="tab:blue", label="uncond aug"),
    "qcond": dict(color="tab:green", label="q-cond aug"),
    "policy-cfg": dict(color="tab:red", label="policy-cfg"),
    "policy-classifier": dict(color="tab:purple", label="policy-classifier"),
}

plt.rcParams.update({
    "figure.figsize": (5.0, 4.0),
    "svg.hashsalt": "polydiff",
    "font.size": 10,
})


def save_figure(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def _reward_landscape(ax, game: GameSpec, resolution: int = 201):
    pts = np.linspace(game.action_low, game.action_high, resolution)
    gx, gy = np.meshgrid(pts, pts, indexing="ij")
    vals = reward_values(game, gx, gy)
    # transpose: imshow/contourf expect [row=y, col=x]
    cs = ax.contourf(pts, pts, vals.T, levels=21, cmap="RdBu_r", alpha=0.7)
    return cs


def fig_dataset_scatter(dataset: OfflineDataset, path: str | Path,
                        max_points: int = 2000) -> Path:
    """Offline joint actions colored by reward, over the reward landscape."""
    fig, ax = plt.subplots()
    _reward_landscape(ax, dataset.game)
    pts = dataset.actions[:max_points]
    rs = dataset.rewards[:max_points]
    sc = ax.scatter(pts[:, 0], pts[:, 1], c=rs, cmap="RdBu_r", s=4,
                    edgecolors="none")
    fig.colorbar(sc, ax=ax, label="reward")
    ax.set_xlabel("$a^x$")
    ax.set_ylabel("$a^y$")
    ax.set_title("offline dataset")
    return save_figure(fig, path)


def fig_policy_paths(game: GameSpec, runs: dict[str, list[StepRecord]],
                     path: str | Path) -> Path:
    """Parameter-space traces, one per variant, over the reward landscape."""
    fig, ax = plt.subplots()
    _reward_landscape(ax, game)
    for name, records in runs.items():
        style = VARIANT_STYLE.get(name, dict(color="k", label=name))
        tx = [r.theta_x for r in records]
        ty = [r.theta_y for r in records]
        ax.plot(tx, ty, lw=1.5, **style)
        ax.plot(tx[0], ty[0], marker="o", color=style["color"], ms=5)
        ax.plot(tx[-1], ty[-1], marker="*", color=style["color"], ms=10)
    ax.set_xlim(game.action_low, game.action_high)
    ax.set_ylim(game.action_low, game.action_high)
    ax.set_xlabel(r"$\theta^x$")
    ax.set_ylabel(r"$\theta^y$")
    ax.set_title("policy evolution")
    ax.legend(loc="lower right", fontsize=8)
    return save_figure(fig, path)


def fig_return_curves(runs: dict[str, list[StepRecord]], path: str | Path) -> Path:
    """Deterministic return against policy-update index."""
    fig, ax = plt.subplots()
    for name, records in runs.items():
        style = VARIANT_STYLE.get(name, dict(color="k", label=name))
        ax.plot([r.step for r in records], [r.ret for r in records],
                lw=1.5, **style)
    ax.set_xlabel("policy update")
    ax.set_ylabel("return")
    ax.set_title("training returns")
    ax.legend(loc="lower right", fontsize=8)
    return save_figure(fig, path)
