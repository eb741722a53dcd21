"""Closed-form verifiers and steering metrics.

Covers the constant-gradient-field and fixed-point calculators for the two
shipped games, the contraction-law battery for the un-normalized guidance
step, per-dimension distribution diagnostics, and the mean action
log-likelihood used to quantify how strongly guided samples concentrate on
the current policy.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import TrajectoryBatch
from .games import GameKind, GameSpec, OfflineDataset, TrajectoryLayout
from .guidance import contraction_step
from .marl import JointPolicy, brud_gradient

__all__ = [
    "FixedPointReport",
    "ConstantFieldReport",
    "ContractionReport",
    "DistributionReport",
    "twin_peaks_fixed_point",
    "twin_peaks_coefficients",
    "fixed_point_report",
    "constant_field_check",
    "mean_policy_loglik",
    "contraction_battery",
    "ks_statistic",
    "distribution_diagnostics",
    "save_report",
]

LOG_2PI = float(np.log(2.0 * np.pi))


def twin_peaks_coefficients(game: GameSpec) -> tuple[float, float, float]:
    """Extract (A, B, C) from a twin-peaks coefficient map."""
    if game.kind is not GameKind.TWIN_PEAKS:
        raise ValueError("not a twin-peaks game")
    c = game.coefficients
    return -c[(2, 0)], -c[(2, 2)], c[(1, 1)]


def twin_peaks_fixed_point(a: float, b: float, c: float,
                           mean_other: float, var_other: float) -> float:
    """Stationary parameter of the data-batch best response for one agent:

        theta* = C * mean_other / (2A + 2B * (mean_other^2 + var_other))

    where mean/var are the teammate's dataset action moments.
    """
    if a <= 0 or b < 0:
        raise ValueError("requires A > 0 and B >= 0")
    return c * mean_other / (2.0 * a + 2.0 * b * (mean_other**2 + var_other))


@dataclass(frozen=True)
class FixedPointReport:
    predicted: np.ndarray  # (theta_x*, theta_y*)
    empirical: np.ndarray
    gap: np.ndarray

    def to_text(self) -> str:
        return "\n".join(
            [
                f"predicted_theta_x\t{self.predicted[0]:.17g}",
                f"predicted_theta_y\t{self.predicted[1]:.17g}",
                f"empirical_theta_x\t{self.empirical[0]:.17g}",
                f"empirical_theta_y\t{self.empirical[1]:.17g}",
                f"gap_x\t{self.gap[0]:.17g}",
                f"gap_y\t{self.gap[1]:.17g}",
            ]
        )


def fixed_point_report(game: GameSpec, dataset: OfflineDataset,
                       empirical_theta: np.ndarray) -> FixedPointReport:
    """Compare a converged policy against the closed-form stationary point."""
    a, b, c = twin_peaks_coefficients(game)
    mean, var = dataset.stats.mean, dataset.stats.var
    predicted = np.array(
        [
            twin_peaks_fixed_point(a, b, c, mean[1], var[1]),
            twin_peaks_fixed_point(a, b, c, mean[0], var[0]),
        ]
    )
    empirical = np.asarray(empirical_theta, dtype=float)
    return FixedPointReport(predicted, empirical, np.abs(predicted - empirical))


@dataclass(frozen=True)
class ConstantFieldReport:
    expected_field: np.ndarray  # (mean a^y, mean a^x)
    max_deviation: float
    n_points: int

    def to_text(self) -> str:
        return "\n".join(
            [
                f"expected_field_x\t{self.expected_field[0]:.17g}",
                f"expected_field_y\t{self.expected_field[1]:.17g}",
                f"max_deviation\t{self.max_deviation:.17g}",
                f"n_points\t{self.n_points}",
            ]
        )


def constant_field_check(game: GameSpec, dataset: OfflineDataset,
                         n_points: int = 100, seed: int = 0) -> ConstantFieldReport:
    """Verify the full-batch gradient field of the multiplication game is the
    constant (mean a^y, mean a^x) regardless of the policy point."""
    if game.kind is not GameKind.MULTIPLICATION:
        raise ValueError("constant-field check applies to the multiplication game")
    mean = dataset.stats.mean
    expected = np.array([mean[1], mean[0]])
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        theta = rng.uniform(game.action_low, game.action_high, size=2)
        policy = JointPolicy(theta[0], theta[1], game.action_low, game.action_high)
        g = np.array(brud_gradient(game, dataset.actions, policy))
        worst = max(worst, float(np.max(np.abs(g - expected))))
    return ConstantFieldReport(expected, worst, n_points)


def mean_policy_loglik(batch, policy: JointPolicy, std: float = 1.0) -> float:
    """Mean over samples of the joint Gaussian-surrogate log-likelihood,
    summed over horizon and agents (normalization constant included).

    `batch` is a TrajectoryBatch in data space or a raw action array shaped
    (n, 2) or (n, H, 2).
    """
    if isinstance(batch, TrajectoryBatch):
        if batch.space != "data":
            raise ValueError("batch must be de-normalized to data space")
        layout = TrajectoryLayout(horizon=batch.flat.shape[1] // TrajectoryLayout.BLOCK)
        actions = layout.actions_from_flat(batch.flat)
    else:
        actions = np.asarray(batch, dtype=float)
        if actions.ndim == 2:
            actions = actions[:, None, :]
    if len(actions) == 0:
        raise ValueError("empty batch")
    resid = (actions - policy.theta) / std
    per_sample = (-0.5 * resid**2 - np.log(std) - 0.5 * LOG_2PI).sum(axis=(1, 2))
    return float(per_sample.mean())


@dataclass(frozen=True)
class ContractionRow:
    lam: float
    max_identity_error: float  # | ||a'-mu|| - |1-lam| ||a-mu|| |
    classification: str  # contractive / one-step / expansive / identity
    classification_ok: bool
    overshoot_ok: bool  # sign flip for lam in (1, 2); vacuously true elsewhere


@dataclass(frozen=True)
class ContractionReport:
    rows: list[ContractionRow]
    trials: int

    @property
    def passed(self) -> bool:
        return all(
            r.max_identity_error < 1e-12 and r.classification_ok and r.overshoot_ok
            for r in self.rows
        )

    def to_text(self) -> str:
        lines = ["lambda\tmax_identity_error\tclassification\tclass_ok\tovershoot_ok"]
        for r in self.rows:
            lines.append(
                f"{r.lam:g}\t{r.max_identity_error:.3e}\t{r.classification}"
                f"\t{r.classification_ok}\t{r.overshoot_ok}"
            )
        lines.append(f"passed\t{self.passed}")
        return "\n".join(lines)


def _classify(lam: float) -> str:
    if lam == 0.0:
        return "identity"
    if lam == 1.0:
        return "one-step"
    if 0.0 < lam < 2.0:
        return "contractive"
    if lam == 2.0:
        return "reflection"
    return "expansive"


def contraction_battery(lambdas, trials: int = 100, seed: int = 0,
                        dim: int = 2) -> ContractionReport:
    """Check the exact distance law of the guidance step over random pairs.

    For a' = (1-lam) a + lam mu the residual scales as |1-lam| exactly;
    lam in (0,2) contracts, lam = 1 lands on mu, lam outside [0,2] expands,
    and lam in (1,2) overshoots to the far side of mu (componentwise sign
    flip of the residual).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for lam in lambdas:
        lam = float(lam)
        worst = 0.0
        class_ok = True
        overshoot_ok = True
        for _ in range(trials):
            a = rng.uniform(-2.0, 2.0, size=dim)
            mu = rng.uniform(-2.0, 2.0, size=dim)
            a2 = contraction_step(a, mu, lam)
            before = np.linalg.norm(a - mu)
            after = np.linalg.norm(a2 - mu)
            worst = max(worst, abs(after - abs(1.0 - lam) * before))
            if 0.0 < lam < 2.0:
                class_ok &= after < before
            elif lam < 0.0 or lam > 2.0:
                class_ok &= after > before
            elif lam == 0.0:
                class_ok &= bool(np.all(a2 == a))
            if 1.0 < lam < 2.0:
                overshoot_ok &= bool(np.all(np.sign(a2 - mu) == -np.sign(a - mu)))
        rows.append(ContractionRow(lam, worst, _classify(lam), class_ok, overshoot_ok))
    return ContractionReport(rows, trials)


def ks_statistic(x: np.ndarray, y: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    x = np.sort(np.asarray(x, dtype=float))
    y = np.sort(np.asarray(y, dtype=float))
    grid = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, grid, side="right") / len(x)
    cdf_y = np.searchsorted(y, grid, side="right") / len(y)
    return float(np.max(np.abs(cdf_x - cdf_y)))


@dataclass(frozen=True)
class DistributionReport:
    mean_gap: np.ndarray  # per dimension |mean_s - mean_r|
    var_gap: np.ndarray
    ks: np.ndarray

    def to_text(self) -> str:
        lines = ["dim\tmean_gap\tvar_gap\tks"]
        for d in range(len(self.ks)):
            lines.append(
                f"{d}\t{self.mean_gap[d]:.17g}\t{self.var_gap[d]:.17g}\t{self.ks[d]:.17g}"
            )
        return "\n".join(lines)


def distribution_diagnostics(samples: np.ndarray, reference: np.ndarray) -> DistributionReport:
    """Per-dimension moment gaps and KS statistics, samples vs reference."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    if samples.shape[1] != reference.shape[1]:
        raise ValueError("dimension mismatch")
    mean_gap = np.abs(samples.mean(axis=0) - reference.mean(axis=0))
    var_gap = np.abs(samples.var(axis=0, ddof=0) - reference.var(axis=0, ddof=0))
    ks = np.array(
        [ks_statistic(samples[:, d], reference[:, d]) for d in range(samples.shape[1])]
    )
    return DistributionReport(mean_gap, var_gap, ks)


def save_report(report, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(report.to_text() + "\n")
    return path
