"""Minimal feed-forward network with hand-written reverse-mode gradients.

Everything is float64 numpy.  Layers cache what they need on forward and
return input gradients on backward; parameter gradients accumulate on the
layer.  This is deliberately tiny — two layer types cover every network in
the package — and it keeps the training loss exactly differentiable for the
finite-difference checks in the test suite.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Linear",
    "Tanh",
    "Sequential",
    "fourier_features",
    "global_norm",
    "clip_global_norm",
    "sgd_update",
]


class Linear:
    """Affine layer y = x W + b with He-style init scaling."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.W = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        self.b = np.zeros(d_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.W + self.b

    def backward(self, gy: np.ndarray) -> np.ndarray:
        self.gW = self._x.T @ gy
        self.gb = gy.sum(axis=0)
        return gy @ self.W.T

    def params(self):
        return [("W", self.W), ("b", self.b)]

    def grads(self):
        return [("W", self.gW), ("b", self.gb)]


class Tanh:
    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = np.tanh(x)
        return self._y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return gy * (1.0 - self._y**2)

    def params(self):
        return []

    def grads(self):
        return []


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, gy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def params(self):
        out = []
        for k, layer in enumerate(self.layers):
            out.extend((f"{k}.{name}", arr) for name, arr in layer.params())
        return out

    def grads(self):
        out = []
        for k, layer in enumerate(self.layers):
            out.extend((f"{k}.{name}", arr) for name, arr in layer.grads())
        return out


def fourier_features(t: np.ndarray, n_freqs: int = 8, base: float = 0.5) -> np.ndarray:
    """Sinusoidal embedding of a scalar per sample: (n,) -> (n, 2*n_freqs).

    Frequencies are log-spaced powers of two starting at `base`.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    freqs = base * 2.0 ** np.arange(n_freqs)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def global_norm(arrays) -> float:
    total = 0.0
    for a in arrays:
        total += float(np.sum(a * a))
    return float(np.sqrt(total))


def clip_global_norm(grads, max_norm: float) -> float:
    """Rescale gradient arrays in place so their global norm is <= max_norm."""
    norm = global_norm(g for _, g in grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, g in grads:
            g *= scale
    return norm


def sgd_update(params, grads, lr: float) -> None:
    for (_, p), (_, g) in zip(params, grads):
        p -= lr * g
