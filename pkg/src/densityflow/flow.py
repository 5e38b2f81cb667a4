"""Continuous-time reconstruction of the flow from fitted marginals via couplings and Brownian bridges."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DensityFlowError, FlowState, ParticleCloud, RngStream, ShapeMismatch, as_stream
from .eot import Segment, StalePotentials, sample_conditional, sample_coupling


class OutOfRange(DensityFlowError, ValueError):
    def __init__(self, t: float, lo: float, hi: float):
        super().__init__(f"time {t} lies outside the anchor range [{lo}, {hi}]")
        self.t = t


@dataclass(frozen=True, eq=False)
class BridgeChain:
    """Anchor points of ``n_paths`` paths at the anchor times.

    ``indices[p, j]`` is the atom of ``rho_j`` visited by path ``p`` and
    ``anchors[p, j]`` its coordinates. Consecutive anchors of a path are an
    atom pair of the corresponding segment coupling.
    """

    times: tuple
    anchors: np.ndarray  # (n_paths, m, d)
    indices: np.ndarray  # (n_paths, m)
    tau: float

    @property
    def n_paths(self) -> int:
        return self.anchors.shape[0]


def sample_anchor_chain(final_state: FlowState, segments: Sequence[Segment], n_paths: int,
                        rng: RngStream | int, tau: float | None = None, tol: float | None = None) -> BridgeChain:
    """Draw ``(x_1, x_2) ~ gamma_{1,2}`` and then ``x_{j+1} ~ gamma_{j,j+1}(. | x_j)`` along the chain.

    ``tau`` defaults to ``epsilon / (t_2 - t_1)`` of the first segment, i.e.
    the temperature the potentials were solved at.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    m = final_state.m
    if len(segments) != m - 1:
        raise ShapeMismatch(f"{len(segments)} segments for {m} marginals")
    for s in segments:
        limit = 10 * (s.potentials.tol if tol is None else tol)
        if s.potentials.marginal_residual > limit:
            raise StalePotentials(f"segment residual {s.potentials.marginal_residual:g} exceeds {limit:g}")
    times = final_state.times
    if tau is None:
        tau = segments[0].problem.epsilon / (times[1] - times[0]) if m > 1 else 1.0
    stream = as_stream(rng)
    idx = np.zeros((n_paths, m), dtype=np.int64)
    if m == 1:
        idx[:, 0] = stream.child("start").generator().integers(0, final_state.n_particles, n_paths)
    else:
        i0, i1 = sample_coupling(segments[0].problem, segments[0].potentials, n_paths, stream.child("start"))
        idx[:, 0], idx[:, 1] = i0, i1
        for j in range(1, m - 1):
            s = segments[j]
            idx[:, j + 1] = sample_conditional(s.problem, s.potentials, idx[:, j], stream.child("step", j))
    pts = final_state.points
    anchors = np.stack([pts[j][idx[:, j]] for j in range(m)], axis=1)
    return BridgeChain(tuple(times), anchors, idx, float(tau))


def brownian_bridge_point(x0, x1, t0: float, t1: float, t: float, tau: float,
                          rng: RngStream | int | np.random.Generator) -> np.ndarray:
    """Draw from ``N(x0 + s (x1 - x0), tau (t - t0)(t1 - t)/(t1 - t0) I)`` with ``s = (t - t0)/(t1 - t0)``.

    ``x0`` and ``x1`` may be single points or matching ``(n, d)`` batches.
    """
    if not t0 < t1:
        raise ValueError("bridge needs t0 < t1")
    if not tau > 0:
        raise ValueError("bridge temperature must be positive")
    if not t0 <= t <= t1:
        raise OutOfRange(t, t0, t1)
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    s = (t - t0) / (t1 - t0)
    mean = x0 + s * (x1 - x0)
    var = tau * (t - t0) * (t1 - t) / (t1 - t0)
    if var == 0:
        return mean
    gen = rng if isinstance(rng, np.random.Generator) else as_stream(rng).generator()
    return mean + np.sqrt(var) * gen.standard_normal(mean.shape)


def reconstruct_marginal(chains: BridgeChain, t: float, rng: RngStream | int) -> ParticleCloud:
    """One bridge draw per path at time ``t``, between the anchors bracketing ``t``."""
    if chains.n_paths < 1:
        raise ValueError("no chains to reconstruct from")
    times = np.asarray(chains.times)
    if not times[0] <= t <= times[-1]:
        raise OutOfRange(t, times[0], times[-1])
    exact = np.flatnonzero(times == t)
    if exact.size:
        return ParticleCloud(chains.anchors[:, exact[0]])
    j = int(np.searchsorted(times, t, side="right") - 1)
    x = brownian_bridge_point(chains.anchors[:, j], chains.anchors[:, j + 1], times[j], times[j + 1], t,
                              chains.tau, as_stream(rng).child("bridge", repr(float(t))))
    return ParticleCloud(x)
