"""Ground-truth SDE simulation and noisy snapshot generation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import ParticleCloud, RngStream, SnapshotDataset, as_stream, check_finite

# paths are simulated in fixed blocks, each with its own stream, so output
# does not depend on how blocks are scheduled
PATH_BLOCK = 4096


@dataclass(frozen=True)
class SdeSpec:
    """``dZ = drift(t, Z) dt + diffusion dW`` with ``Z_0 ~ N(init_mean, init_std^2 I)``.

    ``drift`` maps ``(t, x)`` with ``x`` of shape ``(n, d)`` to ``(n, d)``.
    """

    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: float
    dim: int
    init_mean: tuple
    init_std: float

    def __post_init__(self):
        if self.diffusion < 0 or self.init_std < 0:
            raise ValueError("diffusion and init_std must be non-negative")
        mean = tuple(float(v) for v in np.broadcast_to(np.asarray(self.init_mean, dtype=float), (self.dim,)))
        object.__setattr__(self, "init_mean", mean)


def gradient_of_potential(psi: Callable, t: float, x, fd_step: float = 1e-4,
                          grad: Callable | None = None) -> np.ndarray:
    """Gradient of ``psi(t, x)`` in ``x``; analytic if ``grad`` is given, else central differences.

    ``x`` may be one point ``(d,)`` or a batch ``(n, d)``; ``psi`` must accept a batch.
    """
    x = np.asarray(x, dtype=float)
    if grad is not None:
        return np.asarray(grad(t, x), dtype=float)
    pts = np.atleast_2d(x)
    d = pts.shape[-1]
    out = np.empty_like(pts)
    for k in range(d):
        e = np.zeros(d)
        e[k] = fd_step
        out[:, k] = (np.asarray(psi(t, pts + e)) - np.asarray(psi(t, pts - e))) / (2 * fd_step)
    return out[0] if x.ndim == 1 else out


def double_well_potential(t: float, x: np.ndarray) -> np.ndarray:
    """``0.5 (x1 - 1.5)^2 (x1 + 1.5)^2 + 10 (x2 + t)^2``."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return 0.5 * (x1 - 1.5) ** 2 * (x1 + 1.5) ** 2 + 10.0 * (x2 + t) ** 2


def double_well_gradient(t: float, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([2.0 * x1 * (x1 * x1 - 2.25), 20.0 * (x2 + t)], axis=-1)


def double_well_spec(sign: float = -1.0) -> SdeSpec:
    """Two-well benchmark in ``R^2`` with diffusion ``1/sqrt(2)`` and ``Z_0 ~ N(0, 0.01 I)``.

    ``sign=-1`` simulates ``dZ = -grad Psi dt``, which sends mass to the
    minima of ``Psi``; ``sign=+1`` is the literal ascent form.
    """
    return SdeSpec(lambda t, x: sign * double_well_gradient(t, x), 1.0 / math.sqrt(2.0), 2, (0.0, 0.0), 0.1)


def ou_spec(theta: float = 1.0, mu: float = 0.0, diffusion: float = 1.0, dim: int = 1,
            init_mean: float | Sequence[float] = 0.0, init_std: float = 1.0) -> SdeSpec:
    """Ornstein-Uhlenbeck ``dZ = -theta (Z - mu) dt + diffusion dW``."""
    return SdeSpec(lambda t, x: -theta * (x - mu), diffusion, dim,
                   tuple(np.broadcast_to(init_mean, (dim,))), init_std)


def ou_moments(t, theta: float, mu: float, diffusion: float, init_mean, init_std: float):
    """Mean and per-coordinate variance of the OU marginal at time ``t``."""
    decay = math.exp(-theta * t)
    mean = mu + (np.asarray(init_mean, dtype=float) - mu) * decay
    var = init_std ** 2 * decay ** 2 + diffusion ** 2 / (2 * theta) * (1 - decay ** 2)
    return mean, var


def _grid(dt: float, t_end: float) -> np.ndarray:
    if not (dt > 0 and t_end > 0):
        raise ValueError("dt and t_end must be positive")
    if dt > t_end * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds t_end={t_end}")
    n = max(1, int(math.ceil(t_end / dt - 1e-9)))
    return np.linspace(0.0, t_end, n + 1)


def euler_maruyama(spec: SdeSpec, dt: float, t_end: float, n_paths: int, rng: RngStream | int,
                   record_times: Sequence[float] | None = None) -> list[ParticleCloud]:
    """Simulate ``n_paths`` independent paths on a uniform grid ending exactly at ``t_end``.

    The step is ``t_end / ceil(t_end / dt)``. Returns one cloud per grid time
    (including ``t = 0``), or per entry of ``record_times`` (each snapped to
    the nearest grid time).
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    grid = _grid(dt, t_end)
    if record_times is None:
        rec = np.arange(grid.size)
    else:
        rt = np.asarray(record_times, dtype=float)
        if np.any(rt < 0) or np.any(rt > t_end * (1 + 1e-12)):
            raise ValueError("record times must lie in [0, t_end]")
        rec = np.abs(grid[None, :] - rt[:, None]).argmin(axis=1)
    stream = as_stream(rng)
    out = np.empty((rec.size, n_paths, spec.dim))
    for start in range(0, n_paths, PATH_BLOCK):
        stop = min(start + PATH_BLOCK, n_paths)
        out[:, start:stop] = _simulate_block(spec, grid, rec, stop - start, stream.child("em", start))
    return [ParticleCloud(p) for p in out]


def _simulate_block(spec, grid, rec, n, stream):
    gen = stream.generator()
    x = np.asarray(spec.init_mean) + spec.init_std * gen.standard_normal((n, spec.dim))
    out = np.empty((rec.size, n, spec.dim))
    want = {}
    for r, g in enumerate(rec):
        want.setdefault(int(g), []).append(r)
    for r in want.get(0, []):
        out[r] = x
    for i in range(1, grid.size):
        h = grid[i] - grid[i - 1]
        step = spec.drift(grid[i - 1], x) * h
        x = x + step + spec.diffusion * math.sqrt(h) * gen.standard_normal((n, spec.dim))
        check_finite(x, f"Euler-Maruyama state at t={grid[i]:.4g}")
        for r in want.get(i, []):
            out[r] = x
    return out


def generate_snapshots(spec: SdeSpec, times: Sequence[float], N: int, sigma: float, dt: float,
                       rng: RngStream | int) -> SnapshotDataset:
    """``N`` fresh realizations per snapshot time, each observed with ``N(0, sigma^2 I)`` noise."""
    times = [float(t) for t in times]
    if N < 1:
        raise ValueError("N must be at least 1")
    if any(b <= a for a, b in zip(times, times[1:])) or times[0] < 0:
        raise ValueError("snapshot times must be non-negative and strictly increasing")
    stream = as_stream(rng)
    m = len(times)
    clean = np.empty((m, N, spec.dim))
    for j, t in enumerate(times):
        if t == 0:
            gen = stream.child("init", j).generator()
            clean[j] = np.asarray(spec.init_mean) + spec.init_std * gen.standard_normal((N, spec.dim))
        else:
            clean[j] = euler_maruyama(spec, min(dt, t), t, N, stream.child("paths", j), record_times=[t])[0].points
    noise = stream.child("noise").generator().standard_normal(clean.shape)
    return SnapshotDataset(tuple(times), clean + sigma * noise, sigma)
