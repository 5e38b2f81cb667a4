import numpy as np
import pytest

from densityflow.core import EstimatorConfig, FlowState, SnapshotDataset
from densityflow.objective import solve_segments


def small_instance(m=3, N=16, B=32, d=2, seed=11, sigma=0.5, tau=0.5, lam=0.05):
    """Random data and a random flow state of matching shape."""
    gen = np.random.default_rng(seed)
    times = tuple(0.25 * (j + 1) for j in range(m))
    obs = gen.normal(size=(m, N, d)) + np.linspace(-1, 1, m)[:, None, None]
    data = SnapshotDataset(times, obs, sigma)
    pts = gen.normal(size=(m, B, d)) + np.linspace(-1, 1, m)[:, None, None]
    state = FlowState.from_array(pts, times)
    cfg = EstimatorConfig(tau, lam, sigma, times[-1] + 0.25)
    return data, state, cfg


@pytest.fixture
def instance():
    data, state, cfg = small_instance()
    return data, state, cfg, solve_segments(state, cfg, tol=1e-11)


ACCEPTANCE_RESULTS: dict = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[acceptance {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_RESULTS[number] = line
    import sys
    sys.__stdout__.write("\n" + line + "\n")
    sys.__stdout__.flush()
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
