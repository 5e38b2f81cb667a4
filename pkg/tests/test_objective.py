import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_instance
from densityflow.core import EstimatorConfig, FlowState, SnapshotDataset
from densityflow.eot import QuadraticCost
from densityflow.kernel import GaussKernel
from densityflow.objective import (FirstVariation, combine_history, entropy_knn, eval_objective, eval_Vj, grad_Vj,
                                   solve_segments)


def test_single_snapshot_has_no_transport_term():
    data, state, cfg = small_instance(m=1)
    loss = eval_objective(state, data, cfg)
    assert loss.eot_sum == 0.0
    assert loss.total == pytest.approx(loss.neg_log_likelihood + loss.entropy_sum, abs=1e-12)


def test_two_single_atoms_by_hand():
    times, sigma, tau, lam = (0.5, 1.0), 0.8, 0.5, 0.1
    X = np.array([[[0.2]], [[1.1]]])
    Y = np.array([[[0.0]], [[1.5]]])
    data = SnapshotDataset(times, X, sigma)
    cfg = EstimatorConfig(tau, lam, sigma, 1.5)
    loss = eval_objective(FlowState.from_array(Y, times), data, cfg, include_entropy=False)
    logk = lambda r: -0.5 * r * r / sigma ** 2 - 0.5 * math.log(2 * math.pi * sigma ** 2)
    nll = -(0.5 * logk(0.2) + 0.5 * logk(0.4)) / lam
    eps = tau * 0.5
    cost = 0.5 * 1.5 ** 2 + 0.5 * eps * math.log(2 * math.pi * eps)
    assert loss.neg_log_likelihood == pytest.approx(nll, abs=1e-12)
    assert loss.eot_sum == pytest.approx(cost / 0.5, abs=1e-9)


def test_first_variation_vanishes_far_from_data():
    data, state, cfg = small_instance(m=1)
    segs = solve_segments(state, cfg)
    assert abs(eval_Vj(np.array([80.0, 80.0]), 0, state, data, cfg, segs)) < 1e-300


def test_two_atom_first_variation_term_by_term():
    times, sigma, tau, lam = (0.5, 1.0), 0.7, 0.5, 0.2
    X = np.array([[[0.0], [1.0]], [[2.0], [3.0]]])
    Y = np.array([[[0.1], [0.9]], [[2.2], [2.7]]])
    data = SnapshotDataset(times, X, sigma)
    cfg = EstimatorConfig(tau, lam, sigma, 1.5)
    state = FlowState.from_array(Y, times)
    segs = solve_segments(state, cfg, tol=1e-12)
    y = np.array([0.4])
    k = GaussKernel(sigma, 1)
    conv = [np.mean(k.eval(X[0, i] - Y[0])) for i in range(2)]
    lik = -sum(0.5 / (2 * lam) * float(k.eval(X[0, i] - y)) / conv[i] for i in range(2))
    eps = tau * 0.5
    cost = QuadraticCost(eps, 1)
    psi = segs[0].potentials.psi
    c = cost.matrix(y[None], Y[1])[0]
    phi_y = -eps * math.log(np.mean(np.exp((psi - c) / eps)))
    assert eval_Vj(y, 0, state, data, cfg, segs) == pytest.approx(lik + phi_y / 0.5, abs=1e-10)


def test_gradient_zero_at_symmetry_center():
    X = np.array([[[-1.0, 0.0], [1.0, 0.0]]])
    Y = np.array([[[-0.5, 0.0], [0.5, 0.0]]])
    data = SnapshotDataset((0.5,), X, 0.6)
    cfg = EstimatorConfig(0.5, 0.1, 0.6, 1.0)
    state = FlowState.from_array(Y, (0.5,))
    assert np.allclose(grad_Vj(np.zeros(2), 0, state, data, cfg, solve_segments(state, cfg)), 0.0, atol=1e-14)


def test_gradient_matches_central_differences(instance):
    data, state, cfg, segs = instance
    y = np.random.default_rng(0).uniform(-2, 2, size=(100, 2))
    h = 1e-5
    for j in range(state.m):
        g = grad_Vj(y, j, state, data, cfg, segs)
        fd = np.stack([(eval_Vj(y + h * e, j, state, data, cfg, segs) - eval_Vj(y - h * e, j, state, data, cfg, segs))
                       / (2 * h) for e in np.eye(2)], -1)
        rel = np.linalg.norm(g - fd, axis=1) / np.maximum(np.linalg.norm(g, axis=1), 1e-8)
        assert np.max(rel) < 1e-5


def test_history_combination_is_linear(instance):
    data, state, cfg, segs = instance
    other = FlowState.from_array(state.points + 0.3, state.times)
    fa = FirstVariation.build(state, data, cfg, segs)
    fb = FirstVariation.build(other, data, cfg, solve_segments(other, cfg))
    y = np.random.default_rng(1).normal(size=(20, 2))
    pot = combine_history(1, [fa, fb], [0.7, 0.2], quad=0.3)
    one = lambda f: combine_history(1, [f], [1.0])
    expected = 0.7 * one(fa).value(y) + 0.2 * one(fb).value(y) + 0.3 * np.sum(y * y, axis=1)
    assert np.allclose(pot.value(y), expected, rtol=1e-12, atol=1e-12)
    g = 0.7 * one(fa).grad(y) + 0.2 * one(fb).grad(y) + 0.6 * y
    assert np.allclose(pot.grad(y), g, rtol=1e-12, atol=1e-12)


def _oscillation_bound(state, data, cfg, segs, j, grid):
    """Certified bound on max - min of V_j over ``grid``.

    The likelihood part lies in ``[-K(0) sum c_i, 0]``; each transport
    extension lies between the min and max over atoms of ``c(y, y_b) - partner_b``.
    """
    fv = FirstVariation.build(state, data, cfg, segs)
    bound = GaussKernel(cfg.sigma, data.dim).eval(np.zeros(data.dim)) * fv.lik_coeff(j).sum()
    for atoms, partner, inv_gap, eps, const in fv.sides(j).values():
        v = 0.5 * np.sum((grid[:, None] - atoms[None]) ** 2, axis=-1) + const - partner[None]
        bound += inv_gap * (v.max() - v.min())
    return float(bound)


def test_oscillation_within_certified_bound():
    g = np.linspace(-3, 3, 25)
    grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    for seed in range(20):
        data, state, cfg = small_instance(seed=seed)
        segs = solve_segments(state, cfg)
        for j in range(state.m):
            v = eval_Vj(grid, j, state, data, cfg, segs)
            assert v.max() - v.min() <= _oscillation_bound(state, data, cfg, segs, j, grid) + 1e-9


def test_entropy_of_uniform_square():
    pts = np.random.default_rng(0).uniform(size=(10_000, 2))
    assert abs(entropy_knn(pts)) < 0.05


def test_entropy_of_standard_normal():
    pts = np.random.default_rng(1).standard_normal((10_000, 2))
    assert entropy_knn(pts) == pytest.approx(-(1 + math.log(2 * math.pi)), abs=0.05)


def test_entropy_scaling():
    pts = np.random.default_rng(2).standard_normal((2000, 2))
    assert entropy_knn(2 * pts) == pytest.approx(entropy_knn(pts) - 2 * math.log(2), abs=1e-10)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_objective_ignores_particle_order(seed):
    data, state, cfg = small_instance(seed=seed % 7)
    gen = np.random.default_rng(seed)
    perm = FlowState.from_array(np.stack([c.points[gen.permutation(state.n_particles)] for c in state.clouds]),
                                state.times)
    a, b = eval_objective(state, data, cfg, eot_tol=1e-11), eval_objective(perm, data, cfg, eot_tol=1e-11)
    assert a.neg_log_likelihood == pytest.approx(b.neg_log_likelihood, rel=1e-12)
    assert a.eot_sum == pytest.approx(b.eot_sum, rel=1e-8)
    assert a.entropy_sum == pytest.approx(b.entropy_sum, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_likelihood_term_is_convex_under_mixing(seed):
    gen = np.random.default_rng(seed)
    data = SnapshotDataset((0.5,), gen.normal(size=(1, 10, 2)), 0.5)
    cfg = EstimatorConfig(0.5, 0.1, 0.5, 1.0)
    a, b = gen.normal(size=(1, 8, 2)), gen.normal(size=(1, 8, 2)) + 1.0
    nll = lambda p: eval_objective(FlowState.from_array(p, (0.5,)), data, cfg,
                                   include_entropy=False).neg_log_likelihood
    mix = np.concatenate([a, b], axis=1)
    assert nll(mix) <= 0.5 * nll(a) + 0.5 * nll(b) + 1e-10
