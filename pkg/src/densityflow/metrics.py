"""Grid densities, squared Hellinger distance, Gaussian oracles, rate fitting and two-sample tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .core import DensityFlowError, ParticleCloud, RngStream, as_stream
from .kernel import GaussKernel, log_convolve

COVERAGE_TOL = 0.02
_CHUNK = 4096


class CoverageError(DensityFlowError, ValueError):
    pass


class GridMismatch(DensityFlowError, ValueError):
    pass


class InsufficientPoints(DensityFlowError, ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Regular lattice of cell centers over the box ``[lo, hi]`` with ``cells`` cells per axis (``d <= 2``)."""

    lo: tuple
    hi: tuple
    cells: int = 200

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi) or not 1 <= len(lo) <= 2:
            raise ValueError("grid metrics support d = 1 or d = 2 only")
        if any(b <= a for a, b in zip(lo, hi)) or self.cells < 2:
            raise ValueError("grid box must have positive extent and at least 2 cells per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def widths(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / self.cells

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    def axes(self) -> list[np.ndarray]:
        return [lo + (np.arange(self.cells) + 0.5) * w for lo, w in zip(self.lo, self.widths)]

    def centers(self) -> np.ndarray:
        """Cell centers as ``(cells^d, d)``, first axis varying slowest."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    @property
    def shape(self) -> tuple:
        return (self.cells,) * self.dim


@dataclass(frozen=True, eq=False)
class GridDensity:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("grid density values must be finite and non-negative")
        object.__setattr__(self, "values", v)

    @property
    def cell_volume(self) -> float:
        return self.grid.cell_volume

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def check_coverage(self, tol: float = COVERAGE_TOL) -> "GridDensity":
        if abs(self.mass - 1.0) > tol:
            raise CoverageError(f"grid holds mass {self.mass:.4f}; enlarge the box or refine the grid")
        return self


def default_grid(clouds: Sequence[ParticleCloud | np.ndarray], sigma: float, cells: int = 200,
                 pad: float = 6.0) -> GridSpec:
    """Bounding box of all clouds padded by ``pad * sigma`` on every side."""
    arrays = [np.asarray(c.points if isinstance(c, ParticleCloud) else c, dtype=float) for c in clouds]
    pts = np.concatenate([a.reshape(a.shape[0], -1) for a in arrays])
    return GridSpec(tuple(pts.min(axis=0) - pad * sigma), tuple(pts.max(axis=0) + pad * sigma), cells)


def smooth_to_grid(cloud: ParticleCloud, sigma: float, grid: GridSpec, check: bool = True) -> GridDensity:
    """``K_sigma * rho`` evaluated at every cell center."""
    if cloud.dim != grid.dim:
        raise ValueError(f"cloud dimension {cloud.dim} differs from grid dimension {grid.dim}")
    kern = GaussKernel(sigma, cloud.dim)
    centers = grid.centers()
    step = max(1, _CHUNK * 64 // cloud.size)
    logv = np.concatenate([log_convolve(kern, cloud.points, centers[i:i + step])
                           for i in range(0, len(centers), step)])
    dens = GridDensity(grid, np.exp(logv))
    return dens.check_coverage() if check else dens


def gaussian_oracle_density(mean, cov_scalar: float, extra_sigma: float, grid: GridSpec,
                            check: bool = True) -> GridDensity:
    """Isotropic Gaussian with per-coordinate variance ``cov_scalar + extra_sigma^2`` on the grid."""
    var = float(cov_scalar) + float(extra_sigma) ** 2
    if not var > 0:
        raise ValueError("oracle variance must be positive")
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (grid.dim,))
    diff = grid.centers() - mean
    logv = -0.5 * grid.dim * math.log(2 * math.pi * var) - 0.5 * np.sum(diff * diff, axis=1) / var
    dens = GridDensity(grid, np.exp(logv))
    return dens.check_coverage() if check else dens


def hellinger_sq(a: GridDensity, b: GridDensity) -> float:
    """``sum_c (sqrt a_c - sqrt b_c)^2 * cell_volume``."""
    if a.grid != b.grid:
        raise GridMismatch("densities live on different grids")
    return float(np.sum((np.sqrt(a.values) - np.sqrt(b.values)) ** 2) * a.cell_volume)


def time_averaged_error(estimates: Sequence[GridDensity], oracles: Sequence[GridDensity],
                        weights: Sequence[float]) -> float:
    """``sum_j weights_j * H^2(estimate_j, oracle_j)``."""
    if not len(estimates) == len(oracles) == len(weights):
        raise ValueError("need one estimate, oracle and weight per time")
    return float(sum(w * hellinger_sq(e, o) for e, o, w in zip(estimates, oracles, weights)))


def rate_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ``ys`` on ``xs`` (pass logarithms for a log-log rate)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size != y.size:
        raise ValueError("xs and ys differ in length")
    if x.size < 3:
        raise InsufficientPoints(f"rate fit needs at least 3 points, got {x.size}")
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom == 0:
        raise InsufficientPoints("all xs are equal")
    return float(xc @ (y - y.mean()) / denom)


def energy_distance(a, b) -> float:
    """Two-sample energy statistic ``2 E|X - Y| - E|X - X'| - E|Y - Y'|`` (V-statistic form)."""
    a = np.asarray(a.points if isinstance(a, ParticleCloud) else a, dtype=float)
    b = np.asarray(b.points if isinstance(b, ParticleCloud) else b, dtype=float)
    return _energy(cdist(np.vstack([a, b]), np.vstack([a, b])), np.arange(len(a) + len(b)), len(a))


def _energy(D, order, n_a):
    ia, ib = order[:n_a], order[n_a:]
    return float(2 * D[np.ix_(ia, ib)].mean() - D[np.ix_(ia, ia)].mean() - D[np.ix_(ib, ib)].mean())


def energy_permutation_test(a, b, n_perm: int = 499, rng: RngStream | int = 0) -> tuple[float, float]:
    """Energy statistic and its permutation p-value ``(1 + #{perm >= obs}) / (1 + n_perm)``."""
    a = np.asarray(a.points if isinstance(a, ParticleCloud) else a, dtype=float)
    b = np.asarray(b.points if isinstance(b, ParticleCloud) else b, dtype=float)
    D = cdist(np.vstack([a, b]), np.vstack([a, b]))
    n = len(a) + len(b)
    obs = _energy(D, np.arange(n), len(a))
    gen = as_stream(rng).generator()
    hits = sum(_energy(D, gen.permutation(n), len(a)) >= obs for _ in range(n_perm))
    return obs, (1 + hits) / (1 + n_perm)
