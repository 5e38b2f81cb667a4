import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from densityflow.cli import run
from densityflow.io import read_cloud, read_csv, read_dataset, read_flow_state

ROOT = Path(__file__).resolve().parents[1]

TINY = """[experiment]
seed = 3
[sde]
potential = {potential}
init_mean = 1.5
init_std = 0.3
[data]
m = 3
N = 12
sigma = {sigma}
horizon = 1.0
[estimator]
tau = 0.5
lam = 0.05
last_weight = extrapolate
[schedule]
K = {K}
n_k = fixed:{n}
step = fixed:1e-4
[baseline]
total_iters = {mf}
step = 1e-4
[sweep]
m_values = 3
N_values = 12
seeds = 1
"""


def tiny(tmp_path, potential="ou", sigma=0.5, K=2, n=10, mf=30):
    p = tmp_path / f"cfg_{potential}_{sigma}_{K}_{n}_{mf}.ini"
    p.write_text(TINY.format(potential=potential, sigma=sigma, K=K, n=n, mf=mf))
    return p


def simulate(tmp_path, cfg):
    out = tmp_path / "sim"
    assert run(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    return out / "dataset.csv"


def fit(cfg, ds, out, *extra):
    return run(["fit", "--config", str(cfg), "--dataset", str(ds), "--out", str(out), *extra])


def test_simulate_benchmark_shapes(tmp_path):
    assert run(["simulate", "--config", str(ROOT / "configs" / "double_well.ini"), "--out", str(tmp_path)]) == 0
    header, rows, meta = read_csv(tmp_path / "dataset.csv")
    assert len(rows) == 512 and header[-2:] == ["x_1", "x_2"]
    assert "config_sha256" in meta
    assert json.loads((tmp_path / "dataset.json").read_text())["times"][-1] == 1.25


def test_noiseless_simulation_and_fit_refusal(tmp_path, capsys):
    cfg = tiny(tmp_path, sigma=0.0)
    ds = simulate(tmp_path, cfg)
    assert read_dataset(ds).noise_sigma == 0.0
    assert fit(cfg, ds, tmp_path / "fit") == 2
    assert "sigma" in capsys.readouterr().err


def test_missing_key_exits_with_usage_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(TINY.format(potential="ou", sigma=0.5, K=1, n=1, mf=1).replace("N = 12\n", ""))
    assert run(["simulate", "--config", str(bad)]) == 2
    assert "data.N" in capsys.readouterr().err


def test_zero_inner_steps_keep_the_initialization(tmp_path):
    cfg = tiny(tmp_path, n=0)
    out = tmp_path / "fit"
    assert fit(cfg, simulate(tmp_path, cfg), out) == 0
    states = [read_flow_state(out / "checkpoints" / f"iter_{k}.csv").points for k in range(3)]
    assert all(np.array_equal(s, states[0]) for s in states)


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny(tmp_path, K=3, n=15)
    ds = simulate(tmp_path, cfg)
    a, b = tmp_path / "a", tmp_path / "b"
    assert fit(cfg, ds, a) == 0
    shutil.copytree(a / "checkpoints", b / "checkpoints")
    for name in ("iter_2.csv", "iter_2.json", "iter_3.csv", "iter_3.json"):
        (b / "checkpoints" / name).unlink()
    assert fit(cfg, ds, b, "--resume") == 0
    for rel in ("loss.csv", "final_state.csv", "checkpoints/iter_3.csv", "checkpoints/iter_3.json"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_seed_replay_is_byte_identical(tmp_path):
    cfg = tiny(tmp_path)
    ds = simulate(tmp_path, cfg)
    assert fit(cfg, ds, tmp_path / "a", "--seed", "9") == 0
    assert fit(cfg, ds, tmp_path / "b", "--seed", "9", "--threads", "3") == 0
    assert fit(cfg, ds, tmp_path / "c", "--seed", "10") == 0
    a, b, c = ((tmp_path / x / "final_state.csv").read_bytes() for x in "abc")
    assert a == b and a != c


def test_compare_starts_both_methods_from_one_point(tmp_path):
    cfg = tiny(tmp_path, K=1, n=5, mf=20)
    ds = simulate(tmp_path, cfg)
    assert run(["compare", "--config", str(cfg), "--dataset", str(ds), "--out", str(tmp_path / "cmp")]) == 0
    header, rows, _ = read_csv(tmp_path / "cmp" / "compare.csv")
    first = {r[1]: r for r in rows if r[0] == "0"}
    assert first["cklgd"][2:] == first["mfld"][2:]
    assert [r[0] for r in rows if r[1] == "mfld"] == ["0", "20"]


def test_reconstruct_anchor_times_midpoint_and_range(tmp_path):
    cfg = tiny(tmp_path)
    ds = simulate(tmp_path, cfg)
    assert fit(cfg, ds, tmp_path / "fit") == 0
    state = read_flow_state(tmp_path / "fit" / "final_state.csv")
    t0, t1 = state.times[0], state.times[1]
    mid = 0.5 * (t0 + t1)
    out = tmp_path / "rec"
    args = ["reconstruct", "--config", str(cfg), "--fit", str(tmp_path / "fit"), "--out", str(out)]
    assert run(args + ["--times", f"{t0!r},{mid!r}", "--paths", "20000"]) == 0
    at_anchor = read_cloud(out / "reconstructed_0.csv").points
    assert set(np.round(at_anchor[:, 0], 12)) <= set(np.round(state.clouds[0].points[:, 0], 12))
    z = read_cloud(out / "reconstructed_1.csv").points[:, 0]
    expected = 0.5 * (state.clouds[0].points.mean() + state.clouds[1].points.mean())
    spread = np.concatenate([state.clouds[0].points, state.clouds[1].points]).std() + 0.5
    assert abs(z.mean() - expected) < 5 * spread / np.sqrt(20000)
    assert run(args + ["--times", "5.0"]) == 2


def test_rate_sweep_single_cell_has_no_slope(tmp_path, capsys):
    cfg = tiny(tmp_path, K=1, n=5)
    assert run(["rate-sweep", "--config", str(cfg), "--out", str(tmp_path / "sw")]) == 0
    assert "undefined" in capsys.readouterr().out
    _, rows, _ = read_csv(tmp_path / "sw" / "sweep.csv")
    assert len(rows) == 1 and float(rows[0][3]) > 0


def test_console_script_runs(tmp_path):
    exe = shutil.which("densityflow")
    if exe is None:
        pytest.skip("console script not installed")
    r = subprocess.run([exe, "simulate", "--config", str(tmp_path / "missing.ini")], capture_output=True, text=True)
    assert r.returncode == 2 and "cannot read config" in r.stderr
