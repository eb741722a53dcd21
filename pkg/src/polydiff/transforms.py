"""Invertible maps between bounded trajectory coordinates and diffusion space.

Two maps are provided:

* ``BoundedMap`` — logit/sigmoid pair for a fixed interval [low, high].
* ``CdfNormalizer`` — per-dimension empirical-CDF uniformization followed by
  the logit, fitted on data.  The CDF uses midpoint plotting positions
  (k - 0.5)/n with linear interpolation, so the forward map is continuous and
  strictly increasing between order statistics.

Both clip the unit-interval value into [eps, 1 - eps] before the logit so no
boundary sample produces an infinity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "BoundedMap",
    "CdfNormalizer",
    "bounded_forward",
    "bounded_inverse",
    "cdf_fit",
    "cdf_forward",
    "cdf_inverse",
    "cdf_inverse_derivative",
    "save_normalizer",
    "load_normalizer",
]

EPS_DEFAULT = 1e-6


def _logit(u):
    return np.log(u) - np.log1p(-u)


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class BoundedMap:
    low: float
    high: float
    epsilon: float = EPS_DEFAULT

    def __post_init__(self) -> None:
        if not self.low < self.high:
            raise ValueError("low must be below high")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must be in (0, 0.5)")


def bounded_forward(m: BoundedMap, x) -> np.ndarray | float:
    """x in [low, high] -> z = logit(clip((x - low)/(high - low), eps, 1-eps))."""
    x = np.clip(np.asarray(x, dtype=float), m.low, m.high)
    u = (x - m.low) / (m.high - m.low)
    z = _logit(np.clip(u, m.epsilon, 1.0 - m.epsilon))
    return float(z) if z.ndim == 0 else z


def bounded_inverse(m: BoundedMap, z) -> np.ndarray | float:
    """z -> low + (high - low) * sigmoid(z); always inside the interval."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite value in bounded_inverse input")
    x = m.low + (m.high - m.low) * _sigmoid(z)
    return float(x) if x.ndim == 0 else x


@dataclass
class CdfNormalizer:
    """Per-dimension empirical-CDF + logit normalizer.

    supports[d] holds the sorted sample values of dimension d.  Dimensions
    whose sample range is zero are flagged constant: forward maps them to
    logit(0.5) = 0 and inverse returns the constant.
    """

    supports: list[np.ndarray]
    epsilon: float = EPS_DEFAULT
    constant: np.ndarray = field(default=None)  # bool per dimension

    def __post_init__(self) -> None:
        if self.constant is None:
            self.constant = np.array([s[0] == s[-1] for s in self.supports])

    @property
    def dim(self) -> int:
        return len(self.supports)


def cdf_fit(data: np.ndarray, epsilon: float = EPS_DEFAULT) -> CdfNormalizer:
    """Fit a normalizer on (n, d) data; needs at least 2 samples."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if len(data) < 2:
        raise ValueError("cdf_fit needs at least 2 samples per dimension")
    supports = [np.sort(data[:, d]) for d in range(data.shape[1])]
    return CdfNormalizer(supports=supports, epsilon=epsilon)


def _empirical_cdf(support: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Midpoint plotting positions: the k-th order statistic sits at (k - 0.5)/n.
    n = len(support)
    positions = (np.arange(1, n + 1) - 0.5) / n
    return np.interp(x, support, positions, left=0.0, right=1.0)


def _empirical_quantile(support: np.ndarray, u: np.ndarray) -> np.ndarray:
    n = len(support)
    positions = (np.arange(1, n + 1) - 0.5) / n
    return np.interp(u, positions, support, left=support[0], right=support[-1])


def cdf_forward(norm: CdfNormalizer, x: np.ndarray) -> np.ndarray:
    """(n, d) or (d,) data -> diffusion-space logit coordinates."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != norm.dim:
        raise ValueError(f"expected {norm.dim} dims, got {x.shape[1]}")
    z = np.empty_like(x)
    for d in range(norm.dim):
        if norm.constant[d]:
            z[:, d] = 0.0
            continue
        u = _empirical_cdf(norm.supports[d], x[:, d])
        z[:, d] = _logit(np.clip(u, norm.epsilon, 1.0 - norm.epsilon))
    return z[0] if single else z


def cdf_inverse(norm: CdfNormalizer, z: np.ndarray) -> np.ndarray:
    """Diffusion-space coordinates back to data space via the quantile map."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != norm.dim:
        raise ValueError(f"expected {norm.dim} dims, got {z.shape[1]}")
    x = np.empty_like(z)
    for d in range(norm.dim):
        if norm.constant[d]:
            x[:, d] = norm.supports[d][0]
            continue
        x[:, d] = _empirical_quantile(norm.supports[d], _sigmoid(z[:, d]))
    return x[0] if single else x


def cdf_inverse_derivative(norm: CdfNormalizer, z: np.ndarray) -> np.ndarray:
    """d(inverse)/dz evaluated per component, for chain-ruling action scores.

    The inverse is quantile(sigmoid(z)); its derivative is the local slope of
    the interpolated quantile times sigmoid'(z).  Zero for constant dimensions
    and outside the clipped CDF range.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    out = np.zeros_like(z)
    for d in range(norm.dim):
        if norm.constant[d]:
            continue
        support = norm.supports[d]
        n = len(support)
        positions = (np.arange(1, n + 1) - 0.5) / n
        u = _sigmoid(z[:, d])
        du_dz = u * (1.0 - u)
        inside = (u > positions[0]) & (u < positions[-1])
        idx = np.clip(np.searchsorted(positions, u, side="right"), 1, n - 1)
        gap_u = positions[idx] - positions[idx - 1]
        gap_x = support[idx] - support[idx - 1]
        slope = np.where(gap_u > 0, gap_x / np.maximum(gap_u, 1e-300), 0.0)
        out[:, d] = np.where(inside, slope * du_dz, 0.0)
    return out[0] if single else out


def save_normalizer(norm: CdfNormalizer, path: str | Path) -> Path:
    """Decimal-text dump of the sorted supports (17 significant digits)."""
    path = Path(path)
    lines = [f"epsilon\t{norm.epsilon:.17g}", f"dims\t{norm.dim}"]
    for d in range(norm.dim):
        vals = "\t".join(f"{v:.17g}" for v in norm.supports[d])
        lines.append(f"support\t{d}\t{vals}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_normalizer(path: str | Path) -> CdfNormalizer:
    lines = Path(path).read_text().strip().split("\n")
    epsilon = float(lines[0].split("\t")[1])
    dims = int(lines[1].split("\t")[1])
    supports: list[np.ndarray] = [None] * dims
    for line in lines[2:]:
        parts = line.split("\t")
        d = int(parts[1])
        supports[d] = np.array([float(v) for v in parts[2:]])
    return CdfNormalizer(supports=supports, epsilon=epsilon)
