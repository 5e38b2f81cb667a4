"""Coordinate KL gradient descent (exact on grids, inexact with particles) and the Langevin baseline."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (EstimatorConfig, FlowState, NumericalUnderflow, ParticleCloud, RngStream, Schedule,
                   SnapshotDataset, as_stream, check_finite, validate_flow_state)
from .objective import (FirstVariation, ObjectiveBreakdown, _check_compatible, combine_history, eval_objective,
                        log_likelihood_terms, solve_segments)

log = logging.getLogger(__name__)

MIN_MASS = 1e-300
WEIGHT_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# exact CKLGD on a discrete support

@dataclass(frozen=True)
class GridFunctional:
    """A functional of ``m`` probability vectors on a shared finite support.

    ``first_variation(rhos, j)`` returns ``dF/drho_j`` at every support point;
    ``value(rhos)`` (optional) returns ``F``.
    """

    support: np.ndarray
    first_variation: Callable[[Sequence[np.ndarray], int], np.ndarray]
    value: Callable[[Sequence[np.ndarray]], float] | None = None
    known_minimum: float | None = None

    @property
    def n(self) -> int:
        return len(self.support)


@dataclass
class ExactResult:
    iterates: np.ndarray  # (K + 1, m, n)
    values: np.ndarray | None  # (K + 1,) when the functional has a value

    @property
    def best_value(self) -> float | None:
        return None if self.values is None else float(np.min(self.values))

    def gaps(self, minimum: float) -> np.ndarray:
        """Best-so-far gap ``min_{k' <= k} F(rho^k') - minimum``."""
        return np.minimum.accumulate(self.values) - minimum


def _check_simplex(rhos: np.ndarray) -> None:
    if np.any(rhos < 0) or np.any(np.abs(rhos.sum(axis=-1) - 1) > 1e-12):
        raise ValueError("each coordinate must be a probability vector")


def cklgd_exact(functional: GridFunctional, init: Sequence[np.ndarray], schedule: Schedule) -> ExactResult:
    """Multiplicative KL-proximal steps ``rho_j <- rho_j exp(-eta_k dF/drho_j)``, renormalized.

    All coordinates at step ``k`` are updated from the iterate ``k - 1``. The
    update runs in the log domain; a cell whose mass drops below ``1e-300``
    raises :class:`NumericalUnderflow`, which means ``eta`` is too large.
    """
    rho = np.array(init, dtype=float)
    if rho.ndim == 1:
        rho = rho[None, :]
    if rho.shape[1] != functional.n:
        raise ValueError(f"init has {rho.shape[1]} cells, support has {functional.n}")
    _check_simplex(rho)
    if np.any(rho <= 0):
        raise ValueError("init must be strictly positive on the support")
    m = rho.shape[0]
    logr = np.log(rho)
    iterates = [rho]
    values = [functional.value(list(rho))] if functional.value else None
    for k in range(schedule.K):
        eta = schedule.eta[k]
        grads = [np.asarray(functional.first_variation(list(rho), j), dtype=float) for j in range(m)]
        logr = logr - eta * np.stack(grads)
        logr -= logsumexp(logr, axis=1, keepdims=True)
        if np.any(logr < math.log(MIN_MASS)) or not np.all(np.isfinite(logr)):
            raise NumericalUnderflow(f"cell mass below {MIN_MASS:g} at step {k + 1}; reduce eta")
        rho = np.exp(logr)
        iterates.append(rho)
        if values is not None:
            values.append(functional.value(list(rho)))
    return ExactResult(np.stack(iterates), None if values is None else np.asarray(values))


def softmax_toy(v: np.ndarray, temperature: float = 1.0) -> tuple[GridFunctional, np.ndarray, float]:
    """``F(rho) = <v, rho> + temperature * sum rho log rho`` on ``len(v)`` cells.

    Returns the functional, its minimizer ``softmax(-v / temperature)`` and the minimum.
    """
    v = np.asarray(v, dtype=float)
    t = float(temperature)

    def fv(rhos, j):
        return v + t * (np.log(rhos[j]) + 1.0)

    def value(rhos):
        r = rhos[0]
        return float(v @ r + t * np.sum(r * np.log(r)))

    fmin = -t * float(logsumexp(-v / t))
    rho_star = np.exp(-v / t - logsumexp(-v / t))
    return GridFunctional(np.arange(v.size), fv, value, fmin), rho_star, fmin


# ---------------------------------------------------------------------------
# history weights

def history_weights(k: int, schedule: Schedule) -> np.ndarray:
    """``w_l(k) = eta_l prod_{l < l' <= k} (1 - tau eta_l')`` for ``l = 1..k``."""
    if not 1 <= k <= schedule.K:
        raise ValueError(f"k={k} outside 1..{schedule.K}")
    eta = schedule.eta[:k]
    keep = 1.0 - schedule.tau * eta
    # tail[l] = prod_{l' > l} keep[l']
    tail = np.append(np.cumprod(keep[::-1])[::-1][1:], 1.0)
    return eta * tail


@dataclass
class HistoryLedger:
    """Every past iterate with its solved segment potentials and first-variation data.

    Entry ``l - 1`` holds ``rho^{l-1}``, used by outer iteration ``l``.
    """

    fields: list = field(default_factory=list)
    solves: int = 0

    def record(self, state: FlowState, data: SnapshotDataset, cfg: EstimatorConfig,
               eot_tol: float = 1e-8) -> FirstVariation:
        segments = solve_segments(state, cfg, tol=eot_tol)
        self.solves += len(segments)
        fv = FirstVariation.build(state, data, cfg, segments)
        self.fields.append(fv)
        return fv

    def __len__(self):
        return len(self.fields)

    @property
    def states(self) -> list[FlowState]:
        return [f.state for f in self.fields]

    def active(self, k: int, schedule: Schedule, floor: float = WEIGHT_FLOOR):
        """Indices (0-based into the ledger) and weights ``w_l(k)`` above ``floor * max w``."""
        if len(self) < k:
            raise ValueError(f"ledger holds {len(self)} iterates, iteration {k} needs {k}")
        w = history_weights(k, schedule)
        idx = np.flatnonzero(w >= floor * w.max())
        return idx, w[idx]


# ---------------------------------------------------------------------------
# Langevin samplers

def _langevin_steps(grad: Callable[[np.ndarray], np.ndarray], z: np.ndarray, h: float, n: int,
                    gen: np.random.Generator, noise_var: Callable[[int], float] | float, what: str,
                    on_step: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """``z <- z - h grad(z) + sqrt(noise_var) xi`` repeated ``n`` times."""
    z = np.array(z, dtype=float)
    for s in range(n):
        var = noise_var(s) if callable(noise_var) else noise_var
        z = z - h * grad(z) + math.sqrt(var) * gen.standard_normal(z.shape)
        check_finite(z, what)
        if on_step is not None:
            on_step(s, z)
    return z


def ula_sample(drift: Callable[[np.ndarray], np.ndarray], particles: ParticleCloud | np.ndarray, h: float,
               n: int, rng: RngStream | int) -> ParticleCloud:
    """``n`` unadjusted Langevin steps ``z <- z - h g(z) + N(0, 2h I)`` on every particle.

    ``drift`` is ``g = grad U`` evaluated on a ``(B, d)`` batch; the chain targets
    roughly ``exp(-U)``. Each step draws fresh independent noise for every particle.
    """
    if not h > 0:
        raise ValueError("ULA step must be positive")
    if n < 0:
        raise ValueError("ULA iteration count must be non-negative")
    pts = particles.points if isinstance(particles, ParticleCloud) else np.atleast_2d(particles)
    gen = as_stream(rng).generator()
    z = _langevin_steps(drift, pts, h, int(n), gen, 2.0 * h, f"ULA state (h={h:g})")
    return ParticleCloud(z)


# ---------------------------------------------------------------------------
# inexact CKLGD

def jittered_init(data: SnapshotDataset, B: int, rng: RngStream | int) -> FlowState:
    """Particles at the observations (resampled when ``B != N``) plus ``N(0, sigma^2/4)`` jitter."""
    stream = as_stream(rng)
    clouds = []
    for j in range(data.m):
        gen = stream.child("init", j).generator()
        obs = data.observations[j]
        pick = obs if B == data.N else obs[gen.integers(0, data.N, size=B)]
        clouds.append(pick + 0.5 * data.noise_sigma * gen.standard_normal(pick.shape))
    return FlowState(tuple(clouds), data.times)


def _resolve_init(init, data, B, stream) -> FlowState:
    if isinstance(init, str):
        if init != "jittered-data":
            raise ValueError(f"unknown initialization {init!r}")
        state = jittered_init(data, B, stream)
    else:
        state = init
    validate_flow_state(state)
    _check_compatible(state, data)
    if state.n_particles != B:
        raise ValueError(f"initial state has {state.n_particles} particles per cloud, expected B={B}")
    return state


@dataclass
class FitResult:
    states: list  # FlowState per outer boundary, states[0] is the initialization
    losses: list  # ObjectiveBreakdown per outer boundary
    ledger: HistoryLedger
    final_segments: list = field(default_factory=list)


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def inexact_cklgd(data: SnapshotDataset, cfg: EstimatorConfig, schedule: Schedule, B: int,
                  init: FlowState | str = "jittered-data", rng: RngStream | int = 0, eot_tol: float = 1e-8,
                  threads: int = 1, history: Sequence[FlowState] | None = None,
                  on_iteration: Callable[[int, FlowState, ObjectiveBreakdown], None] | None = None,
                  log_losses: bool = True) -> FitResult:
    """Particle CKLGD: at outer step ``k`` every coordinate runs ``n_k`` ULA steps on the target

    ``exp(-sum_{l <= k} w_l(k) [V_j(.; rho^{l-1}) + alpha_l |y|^2])``

    started from the particles of ``rho^{k-1}``. Past potentials come from the
    ledger; only the newest iterate is solved at each step.

    ``history`` resumes a run: pass the iterates ``rho^0 .. rho^r`` of an
    earlier run with the same inputs and the result matches an uninterrupted
    run bit for bit. ``on_iteration(k, state, loss)`` is called at every outer
    boundary, including ``k = 0``.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    stream = as_stream(rng)
    ledger = HistoryLedger()
    states, losses = [], []

    def boundary(k, state):
        fv = ledger.record(state, data, cfg, eot_tol)
        loss = eval_objective(state, data, cfg, segments=fv.segments) if log_losses else None
        states.append(state)
        losses.append(loss)
        if loss is not None:
            log.info("outer %d: total %.6f (nll %.6f, eot %.6f, entropy %.6f)", k, loss.total,
                     loss.neg_log_likelihood, loss.eot_sum, loss.entropy_sum)
        if on_iteration is not None:
            on_iteration(k, state, loss)

    if history:
        if len(history) > schedule.K + 1:
            raise ValueError("resume history is longer than the schedule")
        for k, st in enumerate(history):
            validate_flow_state(st)
            boundary(k, st)
    else:
        boundary(0, _resolve_init(init, data, B, stream))

    for k in range(len(states), schedule.K + 1):
        idx, w = ledger.active(k, schedule)
        fields = [ledger.fields[i] for i in idx]
        quad = float(np.sum(w * schedule.alpha[idx]))
        h, n = float(schedule.ula_step[k - 1]), int(schedule.ula_iters[k - 1])
        prev = states[-1]

        def run(j):
            if n == 0:
                return prev.clouds[j]
            pot = combine_history(j, fields, w, quad=quad)
            return ula_sample(pot.grad, prev.clouds[j], h, n, stream.child("ula", k, j))

        boundary(k, FlowState(tuple(_map(run, list(range(data.m)), threads)), data.times))

    return FitResult(states, losses, ledger, list(ledger.fields[-1].segments))


# ---------------------------------------------------------------------------
# mean-field Langevin baseline

def default_anneal(s: int) -> float:
    return 1.0 + math.log1p(s / 100.0)


def mfld_baseline(data: SnapshotDataset, cfg: EstimatorConfig, B: int, total_iters: int,
                  anneal: Callable[[int], float] | None = None, step: float = 1e-3,
                  rng: RngStream | int = 0, init: FlowState | str = "jittered-data", refresh: int = 50,
                  log_every: int | None = None, eot_tol: float = 1e-8, threads: int = 1,
                  log_losses: bool = True) -> FitResult:
    """Annealed mean-field Langevin on the reduced objective.

    Every coordinate moves by ``z <- z - h grad V_j(z; rho) + N(0, 2 h tau / beta_s)``
    with all coordinates updated from the same current state. The likelihood
    part of ``V_j`` tracks the current particles at every step; the transport
    potentials are re-solved every ``refresh`` steps. Losses are logged every
    ``log_every`` steps (default ``refresh``) and at the final step.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    if refresh < 1:
        raise ValueError("refresh must be at least 1")
    anneal = anneal or default_anneal
    log_every = log_every or refresh
    stream = as_stream(rng)
    state = _resolve_init(init, data, B, stream)
    gens = [stream.child("mfld", j).generator() for j in range(data.m)]
    ledger = HistoryLedger()
    res = FitResult([], [], ledger)
    fv = None
    s = 0
    while True:
        logged = s % log_every == 0 or s == total_iters
        if s % refresh == 0 or logged:
            fv = ledger.record(state, data, cfg, eot_tol)
            # only the current potentials are needed
            ledger.fields = ledger.fields[-1:]
        if logged:
            res.states.append(state)
            res.losses.append(eval_objective(state, data, cfg, segments=fv.segments) if log_losses else None)
        if s == total_iters:
            break
        cur = fv if fv.state is state else _refresh_likelihood(fv, state)
        noise = 2.0 * step * cfg.tau / anneal(s)

        def move(j):
            pot = combine_history(j, [cur], [1.0])
            z = state.clouds[j].points
            return z - step * pot.grad(z) + math.sqrt(noise) * gens[j].standard_normal(z.shape)

        new = _map(move, list(range(data.m)), threads)
        for z in new:
            check_finite(z, f"MFLD state at step {s + 1}")
        state = FlowState(tuple(new), data.times)
        s += 1
    res.final_segments = list(ledger.fields[-1].segments)
    return res


def _refresh_likelihood(fv: FirstVariation, state: FlowState) -> FirstVariation:
    """Keep the solved transport potentials of ``fv`` while updating its likelihood factors to ``state``."""
    return FirstVariation(state, fv.data, fv.cfg, fv.segments, log_likelihood_terms(state, fv.data, fv.cfg))
