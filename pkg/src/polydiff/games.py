"""Two-player continuous polynomial games on the action box [-1, 1]^2.

A game is a polynomial reward R(a^x, a^y) = sum_ij c_ij (a^x)^i (a^y)^j shared
by both agents.  The module provides the reward and its analytic gradient, a
brute-force grid optimum oracle, offline dataset generation under several
sampling laws, and exact-decimal dataset serialization.

The environment is single-step and stateless; it is encoded as horizon H = 1
with a constant dummy observation of 0 per agent so the trajectory layout
stays generic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import ClassVar

import numpy as np

__all__ = [
    "GameKind",
    "GameSpec",
    "JointAction",
    "JointTrajectory",
    "TrajectoryLayout",
    "DatasetStats",
    "OfflineDataset",
    "multiplication",
    "twin_peaks",
    "custom_polynomial",
    "reward",
    "reward_values",
    "reward_grad",
    "reward_grad_values",
    "grid_optimum",
    "gen_dataset",
    "save_dataset",
    "load_dataset",
]


class GameKind(Enum):
    MULTIPLICATION = "multiplication"
    TWIN_PEAKS = "twin_peaks"
    CUSTOM_POLYNOMIAL = "custom_polynomial"


@dataclass(frozen=True)
class GameSpec:
    """Polynomial reward specification.

    coefficients maps monomial exponents (i, j) to the coefficient of
    (a^x)^i (a^y)^j.  Actions live in [action_low, action_high].
    """

    kind: GameKind
    coefficients: dict[tuple[int, int], float]
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self) -> None:
        if not self.action_low < self.action_high:
            raise ValueError("action_low must be strictly below action_high")
        for (i, j) in self.coefficients:
            if i < 0 or j < 0:
                raise ValueError(f"negative monomial exponent ({i}, {j})")

    def clip(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, self.action_low, self.action_high)


def multiplication() -> GameSpec:
    """R = a^x * a^y; maxima at the two corners of the main diagonal."""
    return GameSpec(GameKind.MULTIPLICATION, {(1, 1): 1.0})


def twin_peaks(a: float = 1.0, b: float = 4.0, c: float = 5.0) -> GameSpec:
    """R = -A (a^x)^2 - A (a^y)^2 - B (a^x)^2 (a^y)^2 + C a^x a^y.

    Requires A > 0, B > 0 and C > 2A so the origin is a saddle with two
    symmetric interior maxima on the diagonal.
    """
    if not (a > 0 and b > 0 and c > 2 * a):
        raise ValueError("twin peaks requires A > 0, B > 0, C > 2A")
    coeffs = {(2, 0): -a, (0, 2): -a, (2, 2): -b, (1, 1): c}
    return GameSpec(GameKind.TWIN_PEAKS, coeffs)


def custom_polynomial(
    coefficients: dict[tuple[int, int], float],
    action_low: float = -1.0,
    action_high: float = 1.0,
) -> GameSpec:
    """Arbitrary polynomial game, mainly for property tests."""
    return GameSpec(GameKind.CUSTOM_POLYNOMIAL, dict(coefficients), action_low, action_high)


@dataclass(frozen=True)
class JointAction:
    ax: float
    ay: float


def _check_bounds(game: GameSpec, ax, ay) -> None:
    ax = np.asarray(ax)
    ay = np.asarray(ay)
    lo, hi = game.action_low, game.action_high
    if np.any(ax < lo) or np.any(ax > hi) or np.any(ay < lo) or np.any(ay > hi):
        raise ValueError("action outside the game's action box")


def reward_values(game: GameSpec, ax: np.ndarray, ay: np.ndarray) -> np.ndarray:
    """Vectorized reward over parallel arrays of action components."""
    ax = np.asarray(ax, dtype=float)
    ay = np.asarray(ay, dtype=float)
    out = np.zeros(np.broadcast(ax, ay).shape)
    for (i, j), c in game.coefficients.items():
        out = out + c * ax**i * ay**j
    return out


def reward(game: GameSpec, a: JointAction) -> float:
    """Shared reward R(a^x, a^y); raises on out-of-bounds actions."""
    _check_bounds(game, a.ax, a.ay)
    return float(reward_values(game, a.ax, a.ay))


def reward_grad_values(game: GameSpec, ax: np.ndarray, ay: np.ndarray):
    """Vectorized (dR/da^x, dR/da^y) by term-wise differentiation."""
    ax = np.asarray(ax, dtype=float)
    ay = np.asarray(ay, dtype=float)
    shape = np.broadcast(ax, ay).shape
    gx = np.zeros(shape)
    gy = np.zeros(shape)
    for (i, j), c in game.coefficients.items():
        if i > 0:
            gx = gx + c * i * ax ** (i - 1) * ay**j
        if j > 0:
            gy = gy + c * j * ax**i * ay ** (j - 1)
    return gx, gy


def reward_grad(game: GameSpec, a: JointAction) -> tuple[float, float]:
    _check_bounds(game, a.ax, a.ay)
    gx, gy = reward_grad_values(game, a.ax, a.ay)
    return float(gx), float(gy)


def grid_optimum(game: GameSpec, resolution: int) -> tuple[JointAction, float]:
    """Exhaustive argmax of the reward over a resolution x resolution grid.

    Ties are broken by the lexicographically smallest (a^x, a^y).  Serves as
    the brute-force oracle for closed-form optimum values.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    pts = np.linspace(game.action_low, game.action_high, resolution)
    gx, gy = np.meshgrid(pts, pts, indexing="ij")
    vals = reward_values(game, gx, gy)
    best = vals.max()
    ties = np.argwhere(vals == best)
    # argwhere returns rows in lexicographic (ax index, ay index) order already
    i, j = ties[0]
    return JointAction(float(pts[i]), float(pts[j])), float(best)


# ---------------------------------------------------------------------------
# Trajectories and offline datasets (H = 1 in every shipped experiment)
# ---------------------------------------------------------------------------

N_AGENTS = 2
OBS_VALUE = 0.0  # constant dummy observation for the stateless game


@dataclass(frozen=True)
class TrajectoryLayout:
    """Column layout of a flattened joint trajectory.

    Per time step the block is [obs_x, obs_y, a_x, a_y, reward]; blocks are
    concatenated over the horizon.  The action-coordinate bookkeeping here is
    what lets guidance touch only action columns.
    """

    horizon: int = 1

    BLOCK: ClassVar[int] = 5

    @property
    def dim(self) -> int:
        return self.BLOCK * self.horizon

    @property
    def obs_columns(self) -> np.ndarray:
        return np.concatenate([[5 * t, 5 * t + 1] for t in range(self.horizon)])

    @property
    def action_columns(self) -> np.ndarray:
        """All action columns, ordered (t ascending, agent x before y)."""
        return np.concatenate([[5 * t + 2, 5 * t + 3] for t in range(self.horizon)])

    @property
    def reward_columns(self) -> np.ndarray:
        return np.array([5 * t + 4 for t in range(self.horizon)])

    def actions_from_flat(self, flat: np.ndarray) -> np.ndarray:
        """(n, dim) flattened batch -> (n, horizon, 2) action array."""
        flat = np.atleast_2d(flat)
        return flat[:, self.action_columns].reshape(len(flat), self.horizon, N_AGENTS)


@dataclass(frozen=True)
class JointTrajectory:
    """One joint record: observations (H, 2), actions (H, 2), rewards (H,)."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.rewards)

    def flatten(self) -> np.ndarray:
        rows = [
            np.concatenate([self.obs[t], self.actions[t], [self.rewards[t]]])
            for t in range(self.horizon)
        ]
        return np.concatenate(rows)


@dataclass(frozen=True)
class DatasetStats:
    """Per-agent action sample mean and (population) variance."""

    mean: np.ndarray  # (2,) = (mean a^x, mean a^y)
    var: np.ndarray  # (2,) with ddof = 0

    @staticmethod
    def from_actions(actions: np.ndarray) -> "DatasetStats":
        return DatasetStats(actions.mean(axis=0), actions.var(axis=0, ddof=0))


@dataclass
class OfflineDataset:
    """Fixed behavior dataset: n single-step joint actions plus rewards."""

    game: GameSpec
    actions: np.ndarray  # (n, 2)
    rewards: np.ndarray  # (n,)
    stats: DatasetStats
    seed: int | None = None
    law: str = "uniform"

    def __post_init__(self) -> None:
        self.actions = np.asarray(self.actions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.actions.ndim != 2 or self.actions.shape[1] != N_AGENTS:
            raise ValueError("actions must have shape (n, 2)")
        if len(self.actions) != len(self.rewards):
            raise ValueError("actions and rewards length mismatch")
        _check_bounds(self.game, self.actions[:, 0], self.actions[:, 1])

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def layout(self) -> TrajectoryLayout:
        return TrajectoryLayout(horizon=1)

    def trajectories(self) -> list[JointTrajectory]:
        obs = np.full((1, N_AGENTS), OBS_VALUE)
        return [
            JointTrajectory(obs, self.actions[k : k + 1], self.rewards[k : k + 1])
            for k in range(len(self))
        ]

    def as_matrix(self) -> np.ndarray:
        """Flattened (n, 5) matrix [obs_x, obs_y, a_x, a_y, r]."""
        n = len(self)
        mat = np.empty((n, self.layout.dim))
        mat[:, self.layout.obs_columns] = OBS_VALUE
        mat[:, self.layout.action_columns] = self.actions
        mat[:, self.layout.reward_columns] = self.rewards[:, None]
        return mat

    def recompute_stats(self) -> DatasetStats:
        return DatasetStats.from_actions(self.actions)

    def max_return(self) -> float:
        return float(self.rewards.max())


def _sample_actions(game: GameSpec, n: int, law: str, rng: np.random.Generator,
                    mean, std) -> np.ndarray:
    lo, hi = game.action_low, game.action_high
    if law == "uniform":
        return rng.uniform(lo, hi, size=(n, N_AGENTS))
    if law == "uniform_symmetric":
        # Antithetic pairs (u, -u): the sample mean vanishes to roundoff,
        # which makes the closed-form fixed-point predictions exact.  n must
        # be even.
        if n % 2:
            raise ValueError("uniform_symmetric needs an even n")
        half = rng.uniform(lo, hi, size=(n // 2, N_AGENTS))
        return np.concatenate([half, -half])
    if law == "gaussian":
        if mean is None or std is None:
            raise ValueError("gaussian law needs mean and std")
        draw = rng.normal(np.asarray(mean, dtype=float), std, size=(n, N_AGENTS))
        return np.clip(draw, lo, hi)
    if law == "point":
        if mean is None:
            raise ValueError("point law needs mean")
        return np.tile(np.asarray(mean, dtype=float), (n, 1))
    raise ValueError(f"unknown dataset law {law!r}")


def gen_dataset(
    game: GameSpec,
    n: int,
    seed: int,
    law: str = "uniform",
    mean=None,
    std=None,
) -> OfflineDataset:
    """Generate an offline dataset of n i.i.d. joint actions plus rewards.

    Laws: "uniform" over the action box (default, full coverage),
    "uniform_symmetric" (antithetic uniform with exactly zero sample mean),
    "gaussian" (clipped, centered at `mean` with scale `std`) and "point"
    (degenerate at `mean`).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    actions = _sample_actions(game, n, law, rng, mean, std)
    rewards = reward_values(game, actions[:, 0], actions[:, 1])
    return OfflineDataset(
        game=game,
        actions=actions,
        rewards=rewards,
        stats=DatasetStats.from_actions(actions),
        seed=seed,
        law=law,
    )


# ---------------------------------------------------------------------------
# Serialization: TSV records + JSON sidecar, exact decimal round-trip
# ---------------------------------------------------------------------------

def _game_to_json(game: GameSpec) -> dict:
    return {
        "kind": game.kind.value,
        "coefficients": [[i, j, c] for (i, j), c in sorted(game.coefficients.items())],
        "action_low": game.action_low,
        "action_high": game.action_high,
    }


def _game_from_json(obj: dict) -> GameSpec:
    coeffs = {(int(i), int(j)): float(c) for i, j, c in obj["coefficients"]}
    return GameSpec(GameKind(obj["kind"]), coeffs, obj["action_low"], obj["action_high"])


def save_dataset(ds: OfflineDataset, path: str | Path) -> Path:
    """Write (ax, ay, reward) rows as TSV with a JSON sidecar header.

    Values are printed with 17 significant digits, which round-trips IEEE
    doubles exactly.
    """
    path = Path(path)
    lines = ["ax\tay\treward"]
    for (ax, ay), r in zip(ds.actions, ds.rewards):
        lines.append(f"{ax:.17g}\t{ay:.17g}\t{r:.17g}")
    path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "n": len(ds),
        "seed": ds.seed,
        "law": ds.law,
        "game": _game_to_json(ds.game),
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def load_dataset(path: str | Path) -> OfflineDataset:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".meta.json").read_text())
    rows = path.read_text().strip().split("\n")[1:]  # skip header
    data = np.array([[float(v) for v in row.split("\t")] for row in rows])
    return OfflineDataset(
        game=_game_from_json(meta["game"]),
        actions=data[:, :2],
        rewards=data[:, 2],
        stats=DatasetStats.from_actions(data[:, :2]),
        seed=meta["seed"],
        law=meta["law"],
    )
