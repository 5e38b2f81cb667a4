"""Entropic optimal transport between two uniform particle clouds.

Everything is done in the log domain. The KL reference measure is the
product of the two marginals, so for uniform clouds the coupling induced by
potentials ``(phi, psi)`` is

    gamma_ij = exp((phi_i + psi_j - c_ij) / eps) / (B_mu B_nu).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import DensityFlowError, ParticleCloud, RngStream, ShapeMismatch, as_stream
from .kernel import sq_dists


class NoConvergence(DensityFlowError, RuntimeError):
    def __init__(self, max_iter: int, residual: float):
        super().__init__(f"Sinkhorn did not converge in {max_iter} iterations (residual {residual:.3e}); "
                         "epsilon may be too small for the atom spread")
        self.max_iter = max_iter
        self.residual = residual


class StalePotentials(DensityFlowError, RuntimeError):
    pass


def lse(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


@dataclass(frozen=True)
class QuadraticCost:
    """``c(x, x') = -eps log K_eps(x - x')`` with ``K_eps`` the Gaussian of variance ``eps``.

    Equals ``|x - x'|^2 / 2 + (eps d / 2) log(2 pi eps)``; the constant can be
    dropped with ``include_constant=False``.
    """

    epsilon: float
    dim: int
    include_constant: bool = True

    @property
    def constant(self) -> float:
        if not self.include_constant:
            return 0.0
        return 0.5 * self.epsilon * self.dim * math.log(2.0 * math.pi * self.epsilon)

    def matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return 0.5 * sq_dists(x, y) + self.constant

    def grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``grad_x c(x_i, y_j)`` with shape ``(n, p, d)``."""
        return x[:, None, :] - y[None, :, :]

    def lipschitz_x(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.sqrt(np.max(sq_dists(x, y))))


@dataclass(frozen=True, eq=False)
class EotProblem:
    mu: ParticleCloud
    nu: ParticleCloud
    epsilon: float
    cost: object = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.mu.dim != self.nu.dim:
            raise ShapeMismatch("EOT marginals live in different dimensions")
        if self.cost is None:
            object.__setattr__(self, "cost", QuadraticCost(self.epsilon, self.mu.dim))

    def cost_matrix(self) -> np.ndarray:
        C = self.cost.matrix(self.mu.points, self.nu.points)
        if not np.all(np.isfinite(C)):
            raise ValueError("cost is not finite on all atom pairs")
        return C

    def transposed(self) -> "EotProblem":
        cost = self.cost
        if not isinstance(cost, QuadraticCost):
            raise NotImplementedError("transposing a custom cost is not supported")
        return EotProblem(self.nu, self.mu, self.epsilon, cost)


@dataclass(frozen=True, eq=False)
class SchrodingerPotentials:
    """Converged dual potentials, gauge-fixed so that ``sum(phi) == 0``."""

    phi: np.ndarray
    psi: np.ndarray
    epsilon: float
    marginal_residual: float
    iterations: int = 0
    tol: float = 1e-8
    cost_matrix: np.ndarray = field(default=None, repr=False)

    def shifted(self, c: float) -> "SchrodingerPotentials":
        """Same coupling with ``phi + c`` and ``psi - c`` (breaks the gauge on purpose)."""
        return SchrodingerPotentials(self.phi + c, self.psi - c, self.epsilon, self.marginal_residual,
                                     self.iterations, self.tol, self.cost_matrix)


class Segment(NamedTuple):
    problem: EotProblem
    potentials: SchrodingerPotentials


def _sinkhorn_sweeps(f, g, Ce, log_a, log_b, n, tol, n_sweeps):
    """Plain alternating updates; returns ``(f, g, residual, sweeps_done, converged)``."""
    residual = np.inf
    for it in range(1, n_sweeps + 1):
        f_new = -lse(g[None, :] - Ce + log_b, axis=1)
        # row mass of the coupling built from (f, g) is exp(f - f_new) / n
        residual = float(np.max(np.abs(np.expm1(f - f_new)))) / n
        if residual <= tol:
            return f, g, residual, it, True
        f = f_new
        g = -lse(f[:, None] - Ce + log_a, axis=0)
    return f, g, residual, n_sweeps, False


def _newton_polish(g, Ce, log_a, log_b, tol, max_steps):
    """Damped Newton ascent on the semi-dual in ``g``, with ``f = f(g)`` keeping rows exact.

    The Jacobian of the column masses is a weighted graph Laplacian whose
    null space (the gauge direction) is removed with a rank-one shift; a
    Levenberg damping term is raised whenever a step fails to increase the
    semi-dual. Returns ``(f, g, residual, steps, converged)``.
    """
    p = Ce.shape[1]
    f = -lse(g[None, :] - Ce + log_b, axis=1)
    value = f.mean() + g.mean()
    damping = 0.0
    residual = np.inf
    for step in range(1, max_steps + 1):
        G = np.exp(f[:, None] + g[None, :] - Ce + log_a + log_b)
        col = G.sum(axis=0)
        residual = float(np.max(np.abs(col - 1.0 / p)))
        if residual <= tol:
            return f, g, residual, step, True
        J = np.diag(col) - G.T @ (G / G.sum(axis=1)[:, None]) + 1.0 / p ** 2
        accepted = False
        for _ in range(30):
            try:
                d = np.linalg.solve(J + damping / p * np.eye(p), 1.0 / p - col)
            except np.linalg.LinAlgError:
                damping = max(10 * damping, 1e-6)
                continue
            g_try = g + d
            f_try = -lse(g_try[None, :] - Ce + log_b, axis=1)
            v_try = f_try.mean() + g_try.mean()
            if np.isfinite(v_try) and v_try >= value - 1e-13 * (1 + abs(value)):
                accepted = True
                break
            damping = max(10 * damping, 1e-6)
        if not accepted:
            break
        f, g, value = f_try, g_try, v_try
        damping *= 0.1
    return f, g, residual, max_steps, False


def _solve(C, eps, tol, warmup, newton_steps, g0=None, depth=0):
    """Warm-up sweeps then Newton; on failure retry from the solution at ``4 eps``."""
    n, p = C.shape
    log_a, log_b = -math.log(n), -math.log(p)
    Ce = C / eps
    # sweeps expect g = g(f) so that columns are exact on entry
    f = np.zeros(n) if g0 is None else -lse(g0[None, :] - Ce + log_b, axis=1)
    g = -lse(f[:, None] - Ce + log_a, axis=0)
    f, g, residual, used, done = _sinkhorn_sweeps(f, g, Ce, log_a, log_b, n, tol, warmup)
    if not done and newton_steps > 0:
        f1, g1, res1, steps, done = _newton_polish(g, Ce, log_a, log_b, tol, newton_steps)
        used += steps
        if done:
            return f1, g1, res1, used, True
    if not done and g0 is None and depth < 6:
        fc, gc, _, used_c, done_c = _solve(C, 4.0 * eps, tol, warmup, newton_steps, depth=depth + 1)
        used += used_c
        if done_c:
            f2, g2, res2, used2, done = _solve(C, eps, tol, warmup, newton_steps, g0=4.0 * gc, depth=depth)
            used += used2
            if done:
                return f2, g2, res2, used, True
    return f, g, residual, used, done


def sinkhorn(problem: EotProblem, tol: float = 1e-8, max_iter: int = 10_000,
             warmup: int = 50, newton_steps: int = 50) -> SchrodingerPotentials:
    """Solve the discrete Schrodinger system in the log domain.

    ``warmup`` alternating Sinkhorn sweeps are followed by at most
    ``newton_steps`` Newton steps on the semi-dual, which converge
    quadratically where plain sweeps stall for small ``eps``. When the polish
    fails, the solve is restarted from the solution at ``4 eps`` (epsilon
    scaling), and as a last resort plain sweeps continue up to
    ``max_iter``. The stopping rule is the largest absolute marginal-mass
    mismatch of the induced coupling.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    eps = problem.epsilon
    C = problem.cost_matrix()
    n, p = C.shape
    f, g, residual, used, done = _solve(C, eps, tol, min(warmup, max_iter), newton_steps)
    if not done:
        Ce = C / eps
        f, g, residual, more, done = _sinkhorn_sweeps(f, g, Ce, -math.log(n), -math.log(p), n, tol,
                                                      max(max_iter - used, 0))
        used += more
    if not done:
        raise NoConvergence(max_iter, residual)
    phi, psi = eps * f, eps * g
    shift = phi.mean()
    return SchrodingerPotentials(phi - shift, psi + shift, eps, residual, used, tol, C)


def _cost(problem: EotProblem, pots: SchrodingerPotentials) -> np.ndarray:
    if pots.cost_matrix is not None:
        return pots.cost_matrix
    return problem.cost_matrix()


def log_coupling(problem: EotProblem, pots: SchrodingerPotentials) -> np.ndarray:
    C = _cost(problem, pots)
    n, p = C.shape
    return (pots.phi[:, None] + pots.psi[None, :] - C) / pots.epsilon - math.log(n) - math.log(p)


def coupling_matrix(problem: EotProblem, pots: SchrodingerPotentials) -> np.ndarray:
    return np.exp(log_coupling(problem, pots))


def marginal_residual(problem: EotProblem, pots: SchrodingerPotentials) -> float:
    gamma = coupling_matrix(problem, pots)
    n, p = gamma.shape
    return float(max(np.max(np.abs(gamma.sum(axis=1) - 1.0 / n)),
                     np.max(np.abs(gamma.sum(axis=0) - 1.0 / p))))


def eot_cost(problem: EotProblem, pots: SchrodingerPotentials) -> float:
    """Converged dual value ``mean(phi) + mean(psi)``."""
    if pots.marginal_residual > 10 * pots.tol:
        raise StalePotentials(f"marginal residual {pots.marginal_residual:.3e} exceeds 10 x tol")
    return float(pots.phi.mean() + pots.psi.mean())


def primal_value(problem: EotProblem, gamma: np.ndarray) -> float:
    """``<c, gamma> + eps KL(gamma || mu x nu)`` for an arbitrary non-negative ``gamma``."""
    C = problem.cost_matrix()
    n, p = C.shape
    gamma = np.asarray(gamma, dtype=float)
    pos = gamma > 0
    kl = np.sum(gamma[pos] * np.log(gamma[pos] * n * p)) - gamma.sum() + 1.0
    return float(np.sum(gamma * C) + problem.epsilon * kl)


def dual_value(problem: EotProblem, pots: SchrodingerPotentials) -> float:
    """Lagrangian dual; a lower bound on the primal value of every feasible coupling."""
    gamma = coupling_matrix(problem, pots)
    return float(pots.phi.mean() + pots.psi.mean() - pots.epsilon * (gamma.sum() - 1.0))


def _check_query(problem: EotProblem, query) -> tuple[np.ndarray, bool]:
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[-1] != problem.mu.dim:
        raise ShapeMismatch(f"query dimension {q.shape[-1]} does not match {problem.mu.dim}")
    return q, single


def _extend(cost, query, atoms, partner, eps) -> np.ndarray:
    C = cost.matrix(query, atoms)
    return -eps * (lse((partner[None, :] - C) / eps, axis=1) - math.log(atoms.shape[0]))


def extend_phi(problem: EotProblem, pots: SchrodingerPotentials, query):
    """Out-of-sample ``phi(x) = -eps log( (1/B) sum_j exp((psi_j - c(x, y_j)) / eps) )``."""
    q, single = _check_query(problem, query)
    out = _extend(problem.cost, q, problem.nu.points, pots.psi, pots.epsilon)
    return out[0] if single else out


def extend_psi(problem: EotProblem, pots: SchrodingerPotentials, query):
    """Out-of-sample ``psi`` against ``mu`` (the cost is assumed symmetric)."""
    q, single = _check_query(problem, query)
    out = _extend(problem.cost, q, problem.mu.points, pots.phi, pots.epsilon)
    return out[0] if single else out


def _grad(cost, query, atoms, partner, eps) -> np.ndarray:
    C = cost.matrix(query, atoms)
    logits = (partner[None, :] - C) / eps
    w = np.exp(logits - lse(logits, axis=1)[:, None])
    return np.einsum("ij,ijk->ik", w, cost.grad_x(query, atoms))


def grad_phi(problem: EotProblem, pots: SchrodingerPotentials, query):
    """Softmax-weighted conditional average of ``grad_x c(x, y_j)``."""
    q, single = _check_query(problem, query)
    out = _grad(problem.cost, q, problem.nu.points, pots.psi, pots.epsilon)
    return out[0] if single else out


def grad_psi(problem: EotProblem, pots: SchrodingerPotentials, query):
    q, single = _check_query(problem, query)
    out = _grad(problem.cost, q, problem.mu.points, pots.phi, pots.epsilon)
    return out[0] if single else out


def _inverse_cdf(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), p.size - 1)


def sample_coupling(problem: EotProblem, pots: SchrodingerPotentials, count: int,
                    rng: RngStream | int) -> tuple[np.ndarray, np.ndarray]:
    """I.i.d. atom-index pairs ``(i, j)`` drawn from the normalized coupling."""
    gamma = coupling_matrix(problem, pots)
    u = as_stream(rng).generator().random(count)
    flat = _inverse_cdf(gamma.ravel(), u)
    return np.divmod(flat, gamma.shape[1])


def sample_conditional(problem: EotProblem, pots: SchrodingerPotentials, rows,
                       rng: RngStream | int) -> np.ndarray:
    """One draw of ``j ~ gamma(. | i)`` for each row index ``i`` in ``rows``."""
    rows = np.asarray(rows, dtype=np.int64)
    gamma = coupling_matrix(problem, pots)
    cdf = np.cumsum(gamma, axis=1)
    cdf /= cdf[:, -1:]
    u = as_stream(rng).generator().random(rows.size)
    out = np.empty(rows.size, dtype=np.int64)
    for r in np.unique(rows):
        sel = rows == r
        out[sel] = np.searchsorted(cdf[r], u[sel], side="right")
    return np.minimum(out, gamma.shape[1] - 1)
