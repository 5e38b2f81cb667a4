"""Isotropic Gaussian kernel, its gradient and convolution against particle clouds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import ParticleCloud, ShapeMismatch


@dataclass(frozen=True)
class GaussKernel:
    """``K_sigma(x) = (2 pi sigma^2)^(-d/2) exp(-|x|^2 / (2 sigma^2))``.

    All methods broadcast over leading axes; the last axis is the coordinate.
    """

    sigma: float
    dim: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.sigma}")
        if self.dim < 1:
            raise ValueError("kernel dimension must be at least 1")

    @property
    def log_norm(self) -> float:
        return -0.5 * self.dim * math.log(2.0 * math.pi * self.sigma ** 2)

    def log_eval(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.log_norm - 0.5 * np.sum(x * x, axis=-1) / self.sigma ** 2

    def eval(self, x) -> np.ndarray:
        return np.exp(self.log_eval(x))

    def grad_eval(self, x) -> np.ndarray:
        """Exact gradient ``-x / sigma^2 * K_sigma(x)``."""
        x = np.asarray(x, dtype=float)
        return -x / self.sigma ** 2 * self.eval(x)[..., None]

    def log_matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """``log K_sigma(a_i - b_j)`` for point sets ``(n, d)`` and ``(p, d)``."""
        return self.log_norm - 0.5 * sq_dists(a, b) / self.sigma ** 2


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances between the rows of ``a`` and ``b``.

    Computed from explicit differences rather than the dot-product expansion so
    that coincident points give exactly zero.
    """
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...ijk,...ijk->...ij", diff, diff)


def log_convolve(kernel: GaussKernel, points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """``log (K_sigma * rho)(q)`` for the uniform measure on ``points``; broadcasts over queries."""
    points = np.asarray(points, dtype=float)
    q = np.atleast_2d(np.asarray(query, dtype=float))
    lk = kernel.log_matrix(q, points)
    return logsumexp(lk, axis=-1) - math.log(points.shape[0])


def convolve_at(kernel: GaussKernel, cloud: ParticleCloud, query, log: bool = False):
    """``(1/B) sum_b K_sigma(query - Y_b)``.

    ``query`` may be a single point ``(d,)`` (scalar result) or a batch ``(n, d)``.
    The sum is always formed in the log domain; ``log=True`` returns the logarithm.
    """
    q = np.asarray(query, dtype=float)
    if cloud.dim != kernel.dim or q.shape[-1] != kernel.dim:
        raise ShapeMismatch(f"dimensions differ: kernel {kernel.dim}, cloud {cloud.dim}, query {q.shape[-1]}")
    out = log_convolve(kernel, cloud.points, q)
    if not log:
        out = np.exp(out)
    return out[0] if q.ndim == 1 else out
