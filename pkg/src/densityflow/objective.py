"""Reduced objective, per-coordinate first variation ``V_j`` and particle entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .core import DensityFlowError, EstimatorConfig, FlowState, ParticleCloud, ShapeMismatch, SnapshotDataset
from .eot import EotProblem, Segment, StalePotentials, eot_cost, lse, sinkhorn
from .kernel import GaussKernel, log_convolve


class DegenerateCloud(DensityFlowError, ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveBreakdown:
    neg_log_likelihood: float
    eot_sum: float
    entropy_sum: float

    @property
    def total(self) -> float:
        return self.neg_log_likelihood + self.eot_sum + self.entropy_sum


def _check_compatible(state: FlowState, data: SnapshotDataset) -> None:
    if state.m != data.m or not np.allclose(state.times, data.times, rtol=0, atol=1e-12):
        raise ShapeMismatch(f"state times {state.times} differ from data times {data.times}")
    if state.dim != data.dim:
        raise ShapeMismatch(f"state dimension {state.dim} differs from data dimension {data.dim}")


def segment_problems(state: FlowState, cfg: EstimatorConfig) -> list[EotProblem]:
    eps = cfg.epsilons(state.times)
    return [EotProblem(state.clouds[j], state.clouds[j + 1], float(eps[j])) for j in range(state.m - 1)]


def solve_segments(state: FlowState, cfg: EstimatorConfig, tol: float = 1e-8,
                   max_iter: int = 10_000) -> list[Segment]:
    """One Sinkhorn solve per adjacent pair ``(rho_j, rho_{j+1})``."""
    return [Segment(p, sinkhorn(p, tol=tol, max_iter=max_iter)) for p in segment_problems(state, cfg)]


def _check_segments(state: FlowState, segments: Sequence[Segment]) -> None:
    if len(segments) != state.m - 1:
        raise ShapeMismatch(f"{len(segments)} segment solutions for {state.m} marginals")
    for s in segments:
        if s.potentials.marginal_residual > 10 * s.potentials.tol:
            raise StalePotentials("segment potentials are not converged")


def log_likelihood_terms(state: FlowState, data: SnapshotDataset, cfg: EstimatorConfig) -> np.ndarray:
    """``log (K_sigma * rho_j)(X^i_{t_j})`` as an ``(m, N)`` array."""
    kern = GaussKernel(cfg.sigma, data.dim)
    return np.stack([log_convolve(kern, state.clouds[j].points, data.observations[j]) for j in range(data.m)])


def entropy_knn(cloud: ParticleCloud | np.ndarray, k: int = 3, jitter: float = 1e-9) -> float:
    """Kozachenko-Leonenko estimate of ``int rho log rho`` (the negative differential entropy).

    Points whose k-th neighbour distance is zero get a deterministic jitter of
    scale ``jitter``; more than 10% such points is an error.
    """
    pts = np.array(cloud.points if isinstance(cloud, ParticleCloud) else cloud, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n, d = pts.shape
    if not n > k >= 1:
        raise DegenerateCloud(f"need more than k={k} points, got {n}")
    r = cKDTree(pts).query(pts, k=k + 1)[0][:, k]
    dup = r <= 0
    if dup.any():
        if dup.mean() > 0.1:
            raise DegenerateCloud(f"{dup.mean():.0%} of points coincide with their neighbours")
        pts[dup] += jitter * np.random.default_rng(0).standard_normal((int(dup.sum()), d))
        r = cKDTree(pts).query(pts, k=k + 1)[0][:, k]
    log_unit_ball = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1)
    h = digamma(n) - digamma(k) + log_unit_ball + d * np.mean(np.log(r))
    return float(-h)


def eval_objective(state: FlowState, data: SnapshotDataset, cfg: EstimatorConfig, eot_tol: float = 1e-8,
                   segments: Sequence[Segment] | None = None, entropy_k: int = 3,
                   include_entropy: bool = True) -> ObjectiveBreakdown:
    """The three terms of the reduced objective.

    ``segments`` may carry already solved potentials for ``state``; otherwise
    they are solved here. ``include_entropy=False`` drops the entropy term
    (needed when clouds have at most ``entropy_k`` atoms).
    """
    _check_compatible(state, data)
    w = cfg.likelihood_weights(state.times)
    loglik = log_likelihood_terms(state, data, cfg)
    nll = float(-np.sum(w / (data.N * cfg.lam) * loglik.sum(axis=1)))
    if segments is None:
        segments = solve_segments(state, cfg, tol=eot_tol)
    _check_segments(state, segments)
    gaps = cfg.segment_lengths(state.times) if state.m > 1 else np.zeros(0)
    eot = float(sum(eot_cost(s.problem, s.potentials) / gaps[j] for j, s in enumerate(segments)))
    ent = 0.0
    if include_entropy:
        ent = cfg.tau * float(sum(entropy_knn(c, entropy_k) for c in state.clouds))
    return ObjectiveBreakdown(nll, eot, ent)


@dataclass(frozen=True, eq=False)
class CoordinatePotential:
    """A weighted sum of first-variation potentials for one coordinate ``j``.

    Represents ``sum_l w_l V_j(.; rho^l) + quad * |y|^2`` with the history
    stacked along a leading axis so evaluation costs a handful of array ops:

    * ``obs`` ``(N, d)`` and ``lik_coeff`` ``(N,)``: the likelihood part is
      ``-sum_i lik_coeff_i K_sigma(X_i - y)``, with the history weights and
      the ``1 / (K_sigma * rho^l)(X_i)`` factors already folded in;
    * ``fwd_*``: potentials ``phi_{j,j+1}`` extended through the ``rho_{j+1}``
      atoms (shape ``(L, B, d)``) and partner ``psi`` values ``(L, B)``;
    * ``bwd_*``: potentials ``psi_{j-1,j}`` extended through ``rho_{j-1}``.
    """

    kernel: GaussKernel
    obs: np.ndarray
    lik_coeff: np.ndarray
    fwd_atoms: np.ndarray | None = None
    fwd_partner: np.ndarray | None = None
    fwd_weight: np.ndarray | None = None
    fwd_eps: float = 1.0
    fwd_const: float = 0.0
    bwd_atoms: np.ndarray | None = None
    bwd_partner: np.ndarray | None = None
    bwd_weight: np.ndarray | None = None
    bwd_eps: float = 1.0
    bwd_const: float = 0.0
    quad: float = 0.0

    def _lik(self, z):
        diff = self.obs[None, :, :] - z[:, None, :]  # (n, N, d)
        k = np.exp(self.kernel.log_norm - 0.5 * np.einsum("nik,nik->ni", diff, diff) / self.kernel.sigma ** 2)
        return diff, k * self.lik_coeff[None, :]

    @staticmethod
    def _side(z, atoms, partner, eps):
        diff = z[None, :, None, :] - atoms[:, None, :, :]  # (L, n, B, d)
        logits = (partner[:, None, :] - 0.5 * np.einsum("lnbk,lnbk->lnb", diff, diff)) / eps
        return diff, logits

    def value(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        _, wk = self._lik(z)
        v = -wk.sum(axis=1)
        for atoms, partner, weight, eps, const in (
                (self.fwd_atoms, self.fwd_partner, self.fwd_weight, self.fwd_eps, self.fwd_const),
                (self.bwd_atoms, self.bwd_partner, self.bwd_weight, self.bwd_eps, self.bwd_const)):
            if atoms is None:
                continue
            _, logits = self._side(z, atoms, partner, eps)
            ext = const - eps * (lse(logits, axis=-1) - math.log(atoms.shape[1]))  # (L, n)
            v = v + weight @ ext
        return v + self.quad * np.sum(z * z, axis=-1)

    def grad(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        diff, wk = self._lik(z)
        g = -np.einsum("ni,nik->nk", wk, diff) / self.kernel.sigma ** 2
        for atoms, partner, weight, eps in (
                (self.fwd_atoms, self.fwd_partner, self.fwd_weight, self.fwd_eps),
                (self.bwd_atoms, self.bwd_partner, self.bwd_weight, self.bwd_eps)):
            if atoms is None:
                continue
            diff, logits = self._side(z, atoms, partner, eps)
            p = np.exp(logits - lse(logits, axis=-1)[..., None])
            g = g + np.einsum("l,lnb,lnbk->nk", weight, p, diff)
        return g + 2.0 * self.quad * z


@dataclass(frozen=True, eq=False)
class FirstVariation:
    """Ingredients of ``V_j(.; rho)`` for every ``j`` at one flow state."""

    state: FlowState
    data: SnapshotDataset
    cfg: EstimatorConfig
    segments: tuple
    loglik: np.ndarray  # (m, N)

    @classmethod
    def build(cls, state: FlowState, data: SnapshotDataset, cfg: EstimatorConfig,
              segments: Sequence[Segment]) -> "FirstVariation":
        _check_compatible(state, data)
        _check_segments(state, segments)
        return cls(state, data, cfg, tuple(segments), log_likelihood_terms(state, data, cfg))

    def lik_coeff(self, j: int) -> np.ndarray:
        w = self.cfg.likelihood_weights(self.state.times)[j]
        return w / (self.data.N * self.cfg.lam) * np.exp(-self.loglik[j])

    def sides(self, j: int) -> dict:
        """Atoms, partner potentials, inverse segment length, eps and cost constant for both neighbours."""
        gaps = self.cfg.segment_lengths(self.state.times) if self.state.m > 1 else np.zeros(0)
        out = {}
        if j < self.state.m - 1:
            s = self.segments[j]
            out["fwd"] = (s.problem.nu.points, s.potentials.psi, 1.0 / gaps[j], s.problem.epsilon,
                          s.problem.cost.constant)
        if j > 0:
            s = self.segments[j - 1]
            out["bwd"] = (s.problem.mu.points, s.potentials.phi, 1.0 / gaps[j - 1], s.problem.epsilon,
                          s.problem.cost.constant)
        return out


def combine_history(j: int, fields: Sequence[FirstVariation], weights: Sequence[float],
                    quad: float = 0.0) -> CoordinatePotential:
    """``sum_l weights[l] V_j(.; fields[l]) + quad |y|^2`` as one :class:`CoordinatePotential`."""
    if len(fields) == 0 or len(fields) != len(weights):
        raise ValueError("need one weight per first-variation field")
    f0 = fields[0]
    kern = GaussKernel(f0.cfg.sigma, f0.data.dim)
    coeff = sum(w * f.lik_coeff(j) for w, f in zip(weights, fields))
    kw = {}
    for side in ("fwd", "bwd"):
        parts = [(w, f.sides(j).get(side)) for w, f in zip(weights, fields)]
        if parts[0][1] is None:
            continue
        kw[f"{side}_atoms"] = np.stack([p[0] for _, p in parts])
        kw[f"{side}_partner"] = np.stack([p[1] for _, p in parts])
        kw[f"{side}_weight"] = np.array([w * p[2] for w, p in parts])
        kw[f"{side}_eps"] = parts[0][1][3]
        kw[f"{side}_const"] = parts[0][1][4]
    return CoordinatePotential(kern, np.asarray(f0.data.observations[j]), coeff, quad=quad, **kw)


def eval_Vj(y, j: int, state: FlowState, data: SnapshotDataset, cfg: EstimatorConfig,
            segments: Sequence[Segment]):
    """``V_j(y; rho)`` at a point ``(d,)`` or a batch ``(n, d)``."""
    pot = combine_history(j, [FirstVariation.build(state, data, cfg, segments)], [1.0])
    y = np.asarray(y, dtype=float)
    out = pot.value(y)
    return out[0] if y.ndim == 1 else out


def grad_Vj(y, j: int, state: FlowState, data: SnapshotDataset, cfg: EstimatorConfig,
            segments: Sequence[Segment]):
    pot = combine_history(j, [FirstVariation.build(state, data, cfg, segments)], [1.0])
    y = np.asarray(y, dtype=float)
    out = pot.grad(y)
    return out[0] if y.ndim == 1 else out
