"""EDM-style trajectory diffusion: preconditioned denoiser, schedules,
training loop, and the Heun sampler with an optional guidance hook.

The denoiser is a small tanh MLP over the flattened trajectory, with a
sinusoidal embedding of the noise level and an additive learned condition
embedding (a trained null vector stands in when the condition is dropped, so
"unconditional" is a trained mode usable by classifier-free guidance).

Preconditioning follows the elucidated-diffusion parameterization:

    D(tau_hat; sigma) = c_skip * tau_hat + c_out * F(c_in * tau_hat, c_noise)

with c_skip = sd^2/(sigma^2 + sd^2), c_out = sigma*sd/sqrt(sigma^2 + sd^2),
c_in = 1/sqrt(sigma^2 + sd^2), c_noise = ln(sigma)/4, sd = sigma_data.  Under
the matching loss weight lambda(sigma) = (sigma^2 + sd^2)/(sigma*sd)^2 the
weighted denoising loss is exactly a unit-weight MSE on the raw network
output, which is what the training loop minimizes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .transforms import CdfNormalizer, load_normalizer, save_normalizer

__all__ = [
    "NoiseSchedule",
    "TrainNoiseLaw",
    "ChurnConfig",
    "TrajectoryBatch",
    "DenoiserModel",
    "karras_sigmas",
    "sample_train_sigma",
    "denoise",
    "estimate_sigma_data",
    "loss_and_grads",
    "train",
    "heun_sample",
    "analytic_gaussian_denoiser",
    "save_checkpoint",
    "load_checkpoint",
    "save_loss_curve",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    steps: int = 40

    def __post_init__(self) -> None:
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.rho <= 0 or self.steps < 1:
            raise ValueError("need rho > 0 and steps >= 1")


def karras_sigmas(s: NoiseSchedule) -> np.ndarray:
    """Decreasing noise levels sigma_0..sigma_{steps-1} plus a terminal 0.

    sigma_i = (max^(1/rho) + i/(steps-1) * (min^(1/rho) - max^(1/rho)))^rho.
    The endpoints are pinned to sigma_max / sigma_min exactly.
    """
    if s.steps == 1:
        return np.array([s.sigma_max, 0.0])
    hi = s.sigma_max ** (1.0 / s.rho)
    lo = s.sigma_min ** (1.0 / s.rho)
    ramp = np.arange(s.steps) / (s.steps - 1)
    sigmas = (hi + ramp * (lo - hi)) ** s.rho
    sigmas[0] = s.sigma_max
    sigmas[-1] = s.sigma_min
    return np.append(sigmas, 0.0)


@dataclass(frozen=True)
class TrainNoiseLaw:
    """Log-normal training noise, clamped into the sampling range."""

    mu_log: float = -1.2
    sigma_log: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 80.0


def sample_train_sigma(law: TrainNoiseLaw, rng: np.random.Generator, size=None):
    g = rng.standard_normal(size)
    return np.clip(np.exp(law.mu_log + law.sigma_log * g), law.sigma_min, law.sigma_max)


@dataclass(frozen=True)
class ChurnConfig:
    """Stochastic churn for the sampler; the default is the deterministic ODE."""

    s_churn: float = 0.0
    s_tmin: float = 0.0
    s_tmax: float = float("inf")
    s_noise: float = 1.0

    def gamma(self, sigma: float, n_steps: int) -> float:
        if self.s_churn <= 0.0 or not self.s_tmin <= sigma <= self.s_tmax:
            return 0.0
        return min(self.s_churn / n_steps, np.sqrt(2.0) - 1.0)


@dataclass
class TrajectoryBatch:
    """A batch of flattened trajectories plus optional per-row conditions.

    `space` records whether rows live in diffusion (normalized) or data
    coordinates.
    """

    flat: np.ndarray
    cond: np.ndarray | None = None
    space: str = "diffusion"

    def __post_init__(self) -> None:
        self.flat = np.atleast_2d(np.asarray(self.flat, dtype=float))
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("non-finite trajectory batch")
        if self.cond is not None and len(self.cond) != len(self.flat):
            raise ValueError("condition rows must align with trajectory rows")

    def __len__(self) -> int:
        return len(self.flat)


class DenoiserModel:
    """Feed-forward EDM denoiser over flattened trajectories.

    cond_dim = 0 builds a purely unconditional model (the null embedding is
    still a parameter and is always active).
    """

    def __init__(
        self,
        d_tau: int,
        cond_dim: int = 0,
        hidden: tuple[int, ...] = (64, 64),
        cond_emb_dim: int = 32,
        n_freqs: int = 8,
        sigma_data: float = 1.0,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.d_tau = d_tau
        self.cond_dim = cond_dim
        self.hidden = tuple(hidden)
        self.cond_emb_dim = cond_emb_dim
        self.n_freqs = n_freqs
        self.sigma_data = float(sigma_data)

        d_in = d_tau + 2 * n_freqs + cond_emb_dim
        layers = []
        prev = d_in
        for h in self.hidden:
            layers += [nn.Linear(prev, h, rng), nn.Tanh()]
            prev = h
        layers.append(nn.Linear(prev, d_tau, rng))
        self.trunk = nn.Sequential(layers)

        if cond_dim > 0:
            self.cond_W = rng.normal(0.0, 1.0 / np.sqrt(cond_dim), (cond_dim, cond_emb_dim))
            self.cond_b = np.zeros(cond_emb_dim)
        else:
            self.cond_W = None
            self.cond_b = None
        self.null_emb = np.zeros(cond_emb_dim)

        self._g_cond_W = None
        self._g_cond_b = None
        self._g_null = None
        self._cache = None

    # -- parameter plumbing -------------------------------------------------

    def params(self):
        out = [(f"trunk.{name}", arr) for name, arr in self.trunk.params()]
        if self.cond_dim > 0:
            out += [("cond.W", self.cond_W), ("cond.b", self.cond_b)]
        out.append(("cond.null", self.null_emb))
        return out

    def grads(self):
        out = [(f"trunk.{name}", arr) for name, arr in self.trunk.grads()]
        if self.cond_dim > 0:
            out += [("cond.W", self._g_cond_W), ("cond.b", self._g_cond_b)]
        out.append(("cond.null", self._g_null))
        return out

    # -- forward / backward -------------------------------------------------

    def _embed_cond(self, n: int, cond, null_mask) -> np.ndarray:
        emb = np.tile(self.null_emb, (n, 1))
        if cond is not None and self.cond_dim > 0:
            cond = np.atleast_2d(np.asarray(cond, dtype=float))
            live = ~null_mask
            emb[live] = cond[live] @ self.cond_W + self.cond_b
        return emb

    def raw_forward(self, z_in: np.ndarray, c_noise: np.ndarray, cond=None,
                    null_mask=None) -> np.ndarray:
        """Un-preconditioned network output F; caches for backward."""
        n = len(z_in)
        if null_mask is None:
            null_mask = np.zeros(n, bool) if (cond is not None and self.cond_dim > 0) \
                else np.ones(n, bool)
        emb = self._embed_cond(n, cond, null_mask)
        x = np.concatenate([z_in, nn.fourier_features(c_noise, self.n_freqs), emb], axis=1)
        self._cache = (cond, null_mask)
        return self.trunk.forward(x)

    def backward(self, gF: np.ndarray) -> None:
        """Accumulate parameter gradients from dLoss/dF."""
        gx = self.trunk.backward(gF)
        g_emb = gx[:, -self.cond_emb_dim:]
        cond, null_mask = self._cache
        self._g_null = g_emb[null_mask].sum(axis=0)
        if self.cond_dim > 0:
            live = ~null_mask
            if cond is None or not np.any(live):
                self._g_cond_W = np.zeros_like(self.cond_W)
                self._g_cond_b = np.zeros_like(self.cond_b)
            else:
                cond = np.atleast_2d(np.asarray(cond, dtype=float))
                self._g_cond_W = cond[live].T @ g_emb[live]
                self._g_cond_b = g_emb[live].sum(axis=0)

    def preconditioning(self, sigma):
        sd = self.sigma_data
        sigma = np.asarray(sigma, dtype=float)
        denom = sigma**2 + sd**2
        c_skip = sd**2 / denom
        c_out = sigma * sd / np.sqrt(denom)
        c_in = 1.0 / np.sqrt(denom)
        c_noise = np.log(sigma) / 4.0
        return c_skip, c_out, c_in, c_noise

    def denoise(self, tau_hat: np.ndarray, sigma, cond=None, null_mask=None) -> np.ndarray:
        """Preconditioned denoised estimate D(tau_hat; sigma [, cond])."""
        tau_hat = np.atleast_2d(np.asarray(tau_hat, dtype=float))
        if not np.all(np.isfinite(tau_hat)):
            raise ValueError("non-finite input to denoise")
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (len(tau_hat),))
        if np.any(sigma <= 0):
            raise ValueError("denoise requires sigma > 0")
        c_skip, c_out, c_in, c_noise = self.preconditioning(sigma)
        F = self.raw_forward(c_in[:, None] * tau_hat, c_noise, cond, null_mask)
        return c_skip[:, None] * tau_hat + c_out[:, None] * F


def denoise(model: DenoiserModel, tau_hat, sigma, cond=None) -> np.ndarray:
    return model.denoise(tau_hat, sigma, cond)


def estimate_sigma_data(data_z: np.ndarray) -> float:
    """Scalar data scale: root mean per-dimension population variance."""
    return float(np.sqrt(np.asarray(data_z).var(axis=0, ddof=0).mean()))


def loss_and_grads(model: DenoiserModel, z0: np.ndarray, sigma: np.ndarray,
                   eps: np.ndarray, cond=None, null_mask=None) -> float:
    """One deterministic training loss evaluation with parameter gradients.

    z = z0 + sigma*eps; the EDM-weighted denoising loss equals the plain MSE
    between the raw output F and (z0 - c_skip*z)/c_out, which is what is
    computed (and backpropagated) here.
    """
    z0 = np.atleast_2d(z0)
    n, d = z0.shape
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
    z = z0 + sigma[:, None] * eps
    c_skip, c_out, c_in, c_noise = model.preconditioning(sigma)
    F = model.raw_forward(c_in[:, None] * z, c_noise, cond, null_mask)
    target = (z0 - c_skip[:, None] * z) / c_out[:, None]
    diff = F - target
    loss = float(np.mean(diff**2))
    model.backward(2.0 * diff / diff.size)
    return loss


def train(
    model: DenoiserModel,
    data_z: np.ndarray,
    law: TrainNoiseLaw,
    rng: np.random.Generator,
    epochs: int = 10000,
    batch: int = 1000,
    lr: float = 1e-2,
    cond: np.ndarray | None = None,
    cond_dropout: float = 0.1,
    grad_clip: float = 10.0,
) -> np.ndarray:
    """SGD training loop; one gradient step per epoch entry of the loss curve.

    Per step: draw a batch with replacement, draw one sigma per sample from
    the log-normal law, corrupt, and minimize the raw-output MSE.  Conditions
    are replaced by the learned null embedding with probability cond_dropout.
    """
    data_z = np.atleast_2d(np.asarray(data_z, dtype=float))
    if len(data_z) == 0:
        raise ValueError("empty training set")
    if cond is not None:
        cond = np.atleast_2d(np.asarray(cond, dtype=float))
    n = len(data_z)
    batch = min(batch, n) if batch else n
    losses = np.empty(epochs)
    for step in range(epochs):
        idx = rng.integers(0, n, size=batch)
        sigma = sample_train_sigma(law, rng, size=batch)
        eps = rng.standard_normal((batch, data_z.shape[1]))
        if cond is not None and model.cond_dim > 0:
            null_mask = rng.random(batch) < cond_dropout
            cbatch = cond[idx]
        else:
            null_mask = np.ones(batch, bool)
            cbatch = None
        loss = loss_and_grads(model, data_z[idx], sigma, eps, cbatch, null_mask)
        if not np.isfinite(loss):
            raise RuntimeError(f"diffusion training diverged at step {step}")
        nn.clip_global_norm(model.grads(), grad_clip)
        nn.sgd_update(model.params(), model.grads(), lr)
        losses[step] = loss
    return losses


def analytic_gaussian_denoiser(m: np.ndarray, sigma_d: float):
    """Exact denoiser for data ~ N(m, sigma_d^2 I):

        D*(tau_hat; sigma) = (sigma_d^2 * tau_hat + sigma^2 * m) / (sigma_d^2 + sigma^2)

    Used to validate the sampler independently of any training.
    """
    m = np.asarray(m, dtype=float)

    def denoise_fn(tau_hat: np.ndarray, sigma: float) -> np.ndarray:
        return (sigma_d**2 * tau_hat + sigma**2 * m) / (sigma_d**2 + sigma**2)

    return denoise_fn


def model_denoise_fn(model: DenoiserModel, cond: np.ndarray | None = None):
    """Adapt a model (with a fixed condition, or none) to the sampler API."""

    def denoise_fn(tau_hat: np.ndarray, sigma: float) -> np.ndarray:
        if cond is None:
            return model.denoise(tau_hat, sigma)
        c = np.broadcast_to(cond, (len(tau_hat), len(cond)))
        return model.denoise(tau_hat, sigma, cond=c,
                             null_mask=np.zeros(len(tau_hat), bool))

    return denoise_fn


def heun_sample(
    denoise_fn,
    d_tau: int,
    schedule: NoiseSchedule,
    n: int,
    rng: np.random.Generator,
    churn: ChurnConfig = ChurnConfig(),
    guide_fn=None,
) -> np.ndarray:
    """Second-order deterministic sampler with optional churn and guidance.

    Per outer step: churn-inflate the state, denoise, form the score direction
    d_n BEFORE guidance, let the guidance hook move the noised state's action
    coordinates, take the Euler step from the (possibly guided) state, and
    apply the trapezoidal second-order correction whenever the target noise
    level is nonzero.  The hook is invoked once per outer step.
    """
    sigmas = karras_sigmas(schedule)
    n_steps = schedule.steps
    tau = rng.standard_normal((n, d_tau)) * sigmas[0]
    for i in range(n_steps):
        s, s_next = sigmas[i], sigmas[i + 1]
        gamma = churn.gamma(s, n_steps)
        if gamma > 0.0:
            s_hat = s * (1.0 + gamma)
            eps = rng.standard_normal((n, d_tau)) * churn.s_noise
            tau_hat = tau + np.sqrt(s_hat**2 - s**2) * eps
        else:
            s_hat, tau_hat = s, tau
        tau_bar = denoise_fn(tau_hat, s_hat)
        d = (tau_hat - tau_bar) / s_hat
        if guide_fn is not None:
            tau_hat = guide_fn(tau_hat, tau_bar, i, n_steps)
        tau_next = tau_hat + (s_next - s_hat) * d
        if s_next != 0.0:
            d_prime = (tau_next - denoise_fn(tau_next, s_next)) / s_next
            tau_next = tau_hat + (s_next - s_hat) * (0.5 * d + 0.5 * d_prime)
        tau = tau_next
        if not np.all(np.isfinite(tau)):
            raise RuntimeError(f"non-finite sampler state after step {i}")
    return tau


# ---------------------------------------------------------------------------
# Checkpoints and loss curves
# ---------------------------------------------------------------------------

def save_checkpoint(model: DenoiserModel, path: str | Path,
                    normalizer: CdfNormalizer | None = None) -> Path:
    """Versioned parameter dump (.npz) plus optional normalizer sidecar."""
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "d_tau": model.d_tau,
        "cond_dim": model.cond_dim,
        "hidden": list(model.hidden),
        "cond_emb_dim": model.cond_emb_dim,
        "n_freqs": model.n_freqs,
        "sigma_data": model.sigma_data,
    }
    arrays = {f"param::{name}": arr for name, arr in model.params()}
    np.savez(path, meta=json.dumps(meta), **arrays)
    if normalizer is not None:
        save_normalizer(normalizer, _normalizer_sidecar(path))
    return path


def _normalizer_sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".normalizer.txt")


def load_checkpoint(path: str | Path):
    """Returns (model, normalizer-or-None)."""
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        model = DenoiserModel(
            d_tau=meta["d_tau"],
            cond_dim=meta["cond_dim"],
            hidden=tuple(meta["hidden"]),
            cond_emb_dim=meta["cond_emb_dim"],
            n_freqs=meta["n_freqs"],
            sigma_data=meta["sigma_data"],
        )
        for name, arr in model.params():
            arr[...] = data[f"param::{name}"]
    sidecar = _normalizer_sidecar(path)
    normalizer = load_normalizer(sidecar) if sidecar.exists() else None
    return model, normalizer


def save_loss_curve(losses: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    lines = ["step\tloss"]
    lines += [f"{k}\t{v:.17g}" for k, v in enumerate(losses)]
    path.write_text("\n".join(lines) + "\n")
    return path
