"""Domain types, schedules and the seeded RNG contract."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np


class DensityFlowError(Exception):
    """Base class for all package errors."""


class InvalidSchedule(DensityFlowError, ValueError):
    pass


class ShapeMismatch(DensityFlowError, ValueError):
    pass


class NonMonotoneTimes(DensityFlowError, ValueError):
    pass


class NonFiniteCoordinate(DensityFlowError, ValueError):
    pass


class RaggedSnapshots(DensityFlowError, ValueError):
    pass


class NonFiniteState(DensityFlowError, FloatingPointError):
    """A simulated or sampled state overflowed; usually a step size is too large."""


class NumericalUnderflow(DensityFlowError, FloatingPointError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Uniform empirical measure over ``B`` atoms in ``R^d``.

    ``points`` is stored as a read-only ``(B, d)`` float array.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ShapeMismatch(f"cloud points must have shape (B, d) with B, d >= 1, got {pts.shape}")
        object.__setattr__(self, "points", _readonly(pts))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.points)))

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def __len__(self):
        return self.size


@dataclass(frozen=True, eq=False)
class FlowState:
    """Ordered marginals ``(rho_1, ..., rho_m)`` on the time grid ``t_1 < ... < t_m``.

    Construction does not validate; call :func:`validate_flow_state`.
    """

    clouds: tuple
    times: tuple

    def __post_init__(self):
        clouds = tuple(c if isinstance(c, ParticleCloud) else ParticleCloud(c) for c in self.clouds)
        object.__setattr__(self, "clouds", clouds)
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))

    @classmethod
    def from_array(cls, points: np.ndarray, times: Sequence[float]) -> "FlowState":
        points = np.asarray(points, dtype=float)
        return cls(tuple(ParticleCloud(p) for p in points), tuple(times))

    @property
    def m(self) -> int:
        return len(self.clouds)

    @property
    def n_particles(self) -> int:
        return self.clouds[0].size

    @property
    def dim(self) -> int:
        return self.clouds[0].dim

    @cached_property
    def points(self) -> np.ndarray:
        """Stacked ``(m, B, d)`` read-only array (requires a valid state)."""
        return _readonly(np.stack([c.points for c in self.clouds]))


def validate_flow_state(state: FlowState) -> None:
    if len(state.clouds) == 0:
        raise ShapeMismatch("flow state has no clouds")
    if len(state.times) != len(state.clouds):
        raise ShapeMismatch(f"{len(state.times)} times for {len(state.clouds)} clouds")
    B, d = state.clouds[0].size, state.clouds[0].dim
    for j, c in enumerate(state.clouds):
        if c.size != B or c.dim != d:
            raise ShapeMismatch(f"cloud {j} has shape {c.points.shape}, expected ({B}, {d})")
    t = np.asarray(state.times)
    if np.any(np.diff(t) <= 0):
        raise NonMonotoneTimes(f"times must be strictly increasing, got {list(state.times)}")
    for j, c in enumerate(state.clouds):
        if not c.is_finite():
            raise NonFiniteCoordinate(f"cloud {j} has non-finite coordinates")


@dataclass(frozen=True, eq=False)
class SnapshotDataset:
    """Noisy observations ``X[j, i]`` at times ``t_j``; ``observations`` has shape ``(m, N, d)``."""

    times: tuple
    observations: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        obs = self.observations
        if not isinstance(obs, np.ndarray):
            sizes = {len(o) for o in obs}
            if len(sizes) > 1:
                raise RaggedSnapshots(f"snapshots have unequal sizes {sorted(sizes)}")
        obs = np.asarray(obs, dtype=float)
        if obs.ndim == 2:
            obs = obs[:, :, None]
        if obs.ndim != 3:
            raise ShapeMismatch(f"observations must have shape (m, N, d), got {obs.shape}")
        times = tuple(float(t) for t in self.times)
        if len(times) != obs.shape[0]:
            raise ShapeMismatch(f"{len(times)} times for {obs.shape[0]} snapshots")
        if np.any(np.diff(times) <= 0):
            raise NonMonotoneTimes(f"snapshot times must be strictly increasing, got {list(times)}")
        if not np.all(np.isfinite(obs)):
            raise NonFiniteCoordinate("observations contain non-finite coordinates")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be non-negative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "observations", _readonly(obs))
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))

    @property
    def m(self) -> int:
        return self.observations.shape[0]

    @property
    def N(self) -> int:
        return self.observations.shape[1]

    @property
    def dim(self) -> int:
        return self.observations.shape[2]


LAST_WEIGHT_RULES = ("horizon", "extrapolate")


@dataclass(frozen=True)
class EstimatorConfig:
    """Objective parameters.

    ``last_weight`` selects how the likelihood weight of the final snapshot
    is formed: ``"horizon"`` uses ``T - t_m``, ``"extrapolate"`` uses
    ``t_m - t_{m-1}``.
    """

    tau: float
    lam: float
    sigma: float
    horizon: float
    last_weight: str = "horizon"

    def __post_init__(self):
        for name in ("tau", "lam", "sigma", "horizon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.last_weight not in LAST_WEIGHT_RULES:
            raise ValueError(f"last_weight must be one of {LAST_WEIGHT_RULES}")

    def segment_lengths(self, times: Sequence[float]) -> np.ndarray:
        """``t_{j+1} - t_j`` for ``j < m`` (length ``m - 1``)."""
        d = np.diff(np.asarray(times, dtype=float))
        if np.any(d <= 0):
            raise NonMonotoneTimes("segment lengths must be positive")
        return d

    def likelihood_weights(self, times: Sequence[float]) -> np.ndarray:
        """``t_{j+1} - t_j`` for every ``j`` including the boundary ``j = m``."""
        t = np.asarray(times, dtype=float)
        gaps = np.diff(t)
        # with a single snapshot there is no trailing gap to extrapolate
        if self.last_weight == "extrapolate" and t.size > 1:
            last = gaps[-1]
        else:
            last = self.horizon - t[-1]
        if last < 0:
            raise ValueError(f"last snapshot time {t[-1]} lies beyond the horizon {self.horizon}")
        return np.append(gaps, last)

    def epsilons(self, times: Sequence[float]) -> np.ndarray:
        """Per-segment entropic regularization ``tau^j = tau (t_{j+1} - t_j)``."""
        return self.tau * self.segment_lengths(times)


@dataclass(frozen=True, eq=False)
class Schedule:
    """Per-outer-iteration sequences; entry ``k - 1`` belongs to iteration ``k``."""

    eta: np.ndarray
    alpha: np.ndarray
    delta: np.ndarray
    ula_step: np.ndarray
    ula_iters: np.ndarray
    tau: float

    def __post_init__(self):
        arrays = {}
        for name in ("eta", "alpha", "delta", "ula_step"):
            a = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            arrays[name] = a
        iters = np.atleast_1d(np.asarray(self.ula_iters))
        if not np.all(iters == np.round(iters)) or np.any(iters < 0):
            raise InvalidSchedule("ula_iters must be non-negative integers")
        arrays["ula_iters"] = iters.astype(np.int64)
        K = arrays["eta"].size
        if K < 1 or any(a.size != K for a in arrays.values()):
            raise InvalidSchedule("all schedule sequences must share one positive length")
        for name in ("eta", "delta", "ula_step"):
            if np.any(arrays[name] <= 0):
                raise InvalidSchedule(f"{name} entries must be positive")
        if np.any(arrays["alpha"] < 0):
            raise InvalidSchedule("alpha entries must be non-negative")
        if np.any(np.diff(arrays["eta"]) > 0):
            raise InvalidSchedule("eta must be non-increasing")
        if self.tau < 0:
            raise InvalidSchedule("tau must be non-negative")
        if np.any(self.tau * arrays["eta"] >= 1):
            raise InvalidSchedule(f"tau * eta_k must stay below 1 (tau={self.tau}, eta_1={arrays['eta'][0]})")
        for name, a in arrays.items():
            object.__setattr__(self, name, _readonly(a) if name != "ula_iters" else a)
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def K(self) -> int:
        return self.eta.size

    def truncated(self, K: int) -> "Schedule":
        if not 1 <= K <= self.K:
            raise InvalidSchedule(f"cannot truncate a length-{self.K} schedule to {K}")
        return Schedule(self.eta[:K], self.alpha[:K], self.delta[:K], self.ula_step[:K],
                        self.ula_iters[:K], self.tau)

    def with_iters(self, n) -> "Schedule":
        return Schedule(self.eta, self.alpha, self.delta, self.ula_step,
                        np.broadcast_to(n, self.eta.shape), self.tau)


def default_schedule(K: int, tau: float, c_h: float = 1.0, c_n: float = 1.0,
                     fixed_iters: int | None = None, fixed_step: float | None = None) -> Schedule:
    """Schedule with ``eta_k = alpha_k = k^-1/2`` and ``delta_k = k^-3/2``.

    The ULA step is ``h_k = c_h alpha_k delta_k`` and the inner iteration count is
    ``ceil(c_n alpha_k^-2 delta_k^-1 log(1/delta_k))`` (at least one), unless
    overridden by ``fixed_step`` / ``fixed_iters``.
    """
    if K < 1:
        raise InvalidSchedule("K must be at least 1")
    if not tau > 0:
        raise InvalidSchedule("tau must be positive")
    if not (c_h > 0 and c_n > 0):
        raise InvalidSchedule("c_h and c_n must be positive")
    if tau >= 1:
        raise InvalidSchedule(f"tau * eta_1 = {tau} >= 1; rescale tau")
    k = np.arange(1, K + 1, dtype=float)
    eta = k ** -0.5
    alpha = k ** -0.5
    delta = k ** -1.5
    if fixed_step is None:
        h = c_h * alpha * delta
    else:
        h = np.full(K, float(fixed_step))
    if fixed_iters is None:
        n = np.maximum(1, np.ceil(c_n * alpha ** -2 / delta * np.log(1.0 / delta)))
    else:
        n = np.full(K, int(fixed_iters))
    return Schedule(eta, alpha, delta, h, n.astype(np.int64), tau)


def _stream_id(parts: Sequence) -> int:
    h = hashlib.blake2b(repr(tuple(parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Backed by Philox, so a given key always yields the same sequence no matter
    which thread consumes it. Derive independent sub-streams with :meth:`child`.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream"):
            v = int(getattr(self, name))
            if not 0 <= v < 2 ** 64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer")
            object.__setattr__(self, name, v)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, _stream_id((self.stream,) + tuple(parts)))


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))


def check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteState(f"{what} became non-finite")
    return a
