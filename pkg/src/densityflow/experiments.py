"""Config-driven pipelines: simulation, fitting with checkpoints, method comparison and rate sweeps."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .core import EstimatorConfig, FlowState, RngStream, Schedule, SnapshotDataset, default_schedule
from .flow import reconstruct_marginal, sample_anchor_chain
from .io import (LOSS_HEADER, config_hash, loss_rows, read_flow_state, write_cloud, write_csv, write_dataset,
                 write_flow_state, write_potentials)
from .metrics import (GridSpec, InsufficientPoints, gaussian_oracle_density, rate_slope, smooth_to_grid,
                      time_averaged_error)
from .objective import solve_segments
from .optim import FitResult, default_anneal, inexact_cklgd, jittered_init, mfld_baseline
from .sde import SdeSpec, double_well_spec, generate_snapshots, ou_moments, ou_spec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# builders

def snapshot_times(cfg: ExperimentConfig, m: int | None = None) -> tuple:
    d = cfg.section("data")
    m = d["m"] if m is None else m
    if d["times"] == "uniform":
        return tuple(d["horizon"] * j / m for j in range(1, m + 1))
    if len(d["times"]) != m:
        raise ConfigError(f"data.times lists {len(d['times'])} times but data.m = {m}")
    return tuple(d["times"])


def sde_from(cfg: ExperimentConfig) -> SdeSpec:
    s = cfg.section("sde")
    if s["potential"] in ("double_well", "double_well_s5"):
        return double_well_spec(sign=s["drift_sign"])
    return ou_spec(theta=s["theta"], mu=s["mu"], diffusion=s["diffusion"], dim=s["dim"],
                   init_mean=s["init_mean"], init_std=s["init_std"])


def particles_from(cfg: ExperimentConfig, data: SnapshotDataset) -> int:
    B = cfg.get("estimator", "B")
    return data.N if B == "N" else B


def estimator_from(cfg: ExperimentConfig, data: SnapshotDataset, lam: float | None = None) -> EstimatorConfig:
    e = cfg.section("estimator")
    if not data.noise_sigma > 0:
        raise ConfigError("fitting needs a positive observation noise sigma")
    horizon = cfg.get("data", "horizon")
    return EstimatorConfig(e["tau"], e["lam"] if lam is None else lam, data.noise_sigma, horizon,
                           e["last_weight"])


def schedule_from(cfg: ExperimentConfig, K: int | None = None, step_scale: float = 1.0) -> Schedule:
    s = cfg.section("schedule")
    n_mode, n_val = s["n_k"]
    h_mode, h_val = s["step"]
    return default_schedule(s["K"] if K is None else K, cfg.get("estimator", "tau"), c_h=s["c_h"], c_n=s["c_n"],
                            fixed_iters=n_val if n_mode == "fixed" else None,
                            fixed_step=h_val * step_scale if h_mode == "fixed" else None)


def anneal_from(cfg: ExperimentConfig):
    b = cfg.section("baseline")
    if b["anneal"] == "none":
        return lambda s: 1.0
    scale = b["anneal_scale"]
    if scale == 100.0:
        return default_anneal
    return lambda s: 1.0 + math.log1p(s / scale)


def streams(seed: int) -> dict:
    root = RngStream(seed)
    return {"data": root.child("data"), "fit": root.child("fit"), "reconstruct": root.child("reconstruct")}


# ---------------------------------------------------------------------------
# simulate

def simulate(cfg: ExperimentConfig, seed: int) -> SnapshotDataset:
    cfg.require("sde", "data")
    d = cfg.section("data")
    return generate_snapshots(sde_from(cfg), snapshot_times(cfg), d["N"], d["sigma"], cfg.get("sde", "dt"),
                              streams(seed)["data"])


def cmd_simulate(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    data = simulate(cfg, seed)
    return write_dataset(out / "dataset.csv", data, seed=seed, config_sha=config_hash(cfg.text))


# ---------------------------------------------------------------------------
# fit

def _inner_counts(schedule: Schedule) -> list[int]:
    return [0] + [int(v) for v in np.cumsum(schedule.ula_iters)]


def _check_dataset(cfg: ExperimentConfig, data: SnapshotDataset) -> None:
    d = cfg.section("data")
    if data.m != d["m"] or data.N != d["N"]:
        raise ConfigError(f"dataset has m={data.m}, N={data.N} but the config says m={d['m']}, N={d['N']}")


@dataclass
class FitOutputs:
    result: FitResult
    out: Path


def _load_history(ckpt_dir: Path, sha: str, K: int) -> list[FlowState]:
    history = []
    for k in range(K + 1):
        meta_path = ckpt_dir / f"iter_{k}.json"
        if not meta_path.exists():
            break
        meta = json.loads(meta_path.read_text())
        if meta.get("config_sha256") != sha:
            raise ConfigError(f"checkpoint {meta_path} was written with a different config")
        history.append(read_flow_state(ckpt_dir / f"iter_{k}.csv"))
    return history


def cmd_fit(cfg: ExperimentConfig, data: SnapshotDataset, seed: int, out: Path, threads: int = 1,
            resume: bool = False) -> FitOutputs:
    cfg.require("data", "estimator", "schedule")
    _check_dataset(cfg, data)
    est = estimator_from(cfg, data)
    sch = schedule_from(cfg)
    B = particles_from(cfg, data)
    sha = config_hash(cfg.text)
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    inner = _inner_counts(sch)
    history = _load_history(ckpt, sha, sch.K) if resume else None
    if history:
        log.info("resuming from %d stored iterates", len(history))
    timing = []
    t0 = time.perf_counter()

    def on_iteration(k, state, loss):
        timing.append((k, time.perf_counter() - t0))
        write_flow_state(ckpt / f"iter_{k}.csv", state, sha, iteration=k)
        meta = {"iteration": k, "total_inner_iteration": inner[k], "config_sha256": sha, "seed": seed,
                "K": sch.K, "B": B, "loss_total": repr(loss.total) if loss else None}
        (ckpt / f"iter_{k}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    res = inexact_cklgd(data, est, sch, B, cfg.get("estimator", "init"), streams(seed)["fit"],
                        eot_tol=cfg.get("estimator", "eot_tol"), threads=threads, history=history,
                        on_iteration=on_iteration)
    write_csv(out / "loss.csv", LOSS_HEADER, loss_rows(res.losses, inner), sha)
    write_csv(out / "timing.csv", ["iteration", "wall_seconds"], timing, sha)
    final = res.states[-1]
    write_flow_state(out / "final_state.csv", final, sha)
    outputs = cfg.section("outputs") if cfg.has("outputs") else {"potentials": False, "final_clouds": True}
    if outputs["final_clouds"]:
        for j, c in enumerate(final.clouds):
            write_cloud(out / "final_clouds" / f"cloud_{j}.csv", c, final.times[j], sha)
    if outputs["potentials"]:
        for j, s in enumerate(res.final_segments):
            write_potentials(out / "potentials" / f"segment_{j}.csv", s, sha)
    return FitOutputs(res, out)


# ---------------------------------------------------------------------------
# compare

def run_compare(cfg: ExperimentConfig, data: SnapshotDataset, seed: int, threads: int = 1):
    cfg.require("data", "estimator", "schedule", "baseline")
    _check_dataset(cfg, data)
    est = estimator_from(cfg, data)
    sch = schedule_from(cfg)
    B = particles_from(cfg, data)
    stream = streams(seed)["fit"]
    init = jittered_init(data, B, stream)
    tol = cfg.get("estimator", "eot_tol")
    ck = inexact_cklgd(data, est, sch, B, init, stream, eot_tol=tol, threads=threads)
    b = cfg.section("baseline")
    mf = None
    if b["enabled"]:
        mf = mfld_baseline(data, est, B, b["total_iters"], anneal=anneal_from(cfg), step=b["step"], rng=stream,
                           init=init, refresh=b["refresh"], eot_tol=tol, threads=threads)
    return ck, mf, _inner_counts(sch)


def mfld_counts(cfg: ExperimentConfig, n_logged: int) -> list[int]:
    b = cfg.section("baseline")
    every = b["refresh"]
    counts = [min(i * every, b["total_iters"]) for i in range(n_logged)]
    return counts


def cmd_compare(cfg: ExperimentConfig, data: SnapshotDataset, seed: int, out: Path, threads: int = 1) -> Path:
    ck, mf, inner = run_compare(cfg, data, seed, threads)
    rows = [[s, "cklgd", l.neg_log_likelihood, l.eot_sum, l.entropy_sum, l.total] for s, l in zip(inner, ck.losses)]
    if mf is not None:
        rows += [[s, "mfld", l.neg_log_likelihood, l.eot_sum, l.entropy_sum, l.total]
                 for s, l in zip(mfld_counts(cfg, len(mf.losses)), mf.losses)]
    return write_csv(out / "compare.csv", ["total_inner_iteration", "method", "nll", "eot", "entropy", "total"],
                     rows, config_hash(cfg.text))


# ---------------------------------------------------------------------------
# reconstruct

def cmd_reconstruct(cfg: ExperimentConfig, fit_dir: Path, times, seed: int, out: Path,
                    n_paths: int | None = None) -> list[Path]:
    cfg.require("estimator")
    state = read_flow_state(fit_dir / "final_state.csv")
    tol = cfg.get("estimator", "eot_tol")
    est = EstimatorConfig(cfg.get("estimator", "tau"), cfg.get("estimator", "lam"), 1.0,
                          max(state.times[-1], cfg.get("data", "horizon") if cfg.has("data") else 0.0),
                          cfg.get("estimator", "last_weight"))
    segs = solve_segments(state, est, tol=tol)
    stream = streams(seed)["reconstruct"]
    chains = sample_anchor_chain(state, segs, n_paths or 10 * state.n_particles, stream.child("chain"),
                                 tau=est.tau)
    sha = config_hash(cfg.text)
    paths = []
    for i, t in enumerate(times):
        cloud = reconstruct_marginal(chains, float(t), stream)
        paths.append(write_cloud(out / f"reconstructed_{i}.csv", cloud, float(t), sha))
    return paths


# ---------------------------------------------------------------------------
# rate sweep against the OU oracle

def ou_oracle_params(cfg: ExperimentConfig) -> dict:
    s = cfg.section("sde")
    if s["potential"] != "ou":
        raise ConfigError("rate sweeps need sde.potential = ou (the oracle is Gaussian)")
    return {"theta": s["theta"], "mu": s["mu"], "diffusion": s["diffusion"], "init_mean": s["init_mean"],
            "init_std": s["init_std"]}


def ou_time_averaged_error(state: FlowState, cfg_est: EstimatorConfig, params: dict, cells: int = 200) -> float:
    """``sum_j w_j H^2(K_sigma * rho_j, K_sigma * R*_{t_j})`` with the Gaussian OU marginals as truth."""
    if state.dim > 2:
        raise ValueError("grid metrics support d <= 2")
    est, orc = [], []
    sig = cfg_est.sigma
    for j, t in enumerate(state.times):
        mean, var = ou_moments(t, **params)
        mean = np.broadcast_to(mean, (state.dim,))
        sd = math.sqrt(var + sig ** 2)
        pts = state.clouds[j].points
        lo = np.minimum(mean - 8 * sd, pts.min(axis=0) - 6 * sig)
        hi = np.maximum(mean + 8 * sd, pts.max(axis=0) + 6 * sig)
        grid = GridSpec(tuple(lo), tuple(hi), cells)
        est.append(smooth_to_grid(state.clouds[j], sig, grid))
        orc.append(gaussian_oracle_density(mean, var, sig, grid))
    return time_averaged_error(est, orc, cfg_est.likelihood_weights(state.times))


def sweep_cell(cfg: ExperimentConfig, m: int, N: int, seed: int) -> float:
    sw = cfg.section("sweep")
    d = cfg.section("data")
    times = snapshot_times(cfg, m) if d["times"] == "uniform" else snapshot_times(cfg)
    st = streams(seed)
    data = generate_snapshots(sde_from(cfg), times, N, d["sigma"], cfg.get("sde", "dt"), st["data"].child(m, N))
    lam = cfg.get("estimator", "lam")
    scale = 1.0
    if sw["lam_rule"] == "inverse_N":
        # lambda ~ 1/N; the ULA step shrinks with it so h / lambda stays fixed
        scale = min(sw["N_values"]) / N
    est = estimator_from(cfg, data, lam=lam * scale)
    sch = schedule_from(cfg, step_scale=scale)
    B = N if cfg.get("estimator", "B") == "N" else cfg.get("estimator", "B")
    res = inexact_cklgd(data, est, sch, B, cfg.get("estimator", "init"), st["fit"].child(m, N),
                        eot_tol=cfg.get("estimator", "eot_tol"), log_losses=False)
    return ou_time_averaged_error(res.states[-1], est, ou_oracle_params(cfg), sw["grid_cells"])


@dataclass
class SweepResult:
    rows: list  # (m, N, seed, error)
    slopes: list  # (axis, fixed_value, slope or None)


def run_rate_sweep(cfg: ExperimentConfig, seed: int) -> SweepResult:
    cfg.require("sde", "data", "estimator", "schedule", "sweep")
    ou_oracle_params(cfg)
    sw = cfg.section("sweep")
    rows = []
    for m in sw["m_values"]:
        for N in sw["N_values"]:
            for s in range(sw["seeds"]):
                err = sweep_cell(cfg, m, N, seed + s)
                log.info("sweep m=%d N=%d seed=%d error=%.6g", m, N, seed + s, err)
                rows.append((m, N, seed + s, err))
    slopes = []
    for m in sw["m_values"]:
        med = [float(np.median([r[3] for r in rows if r[0] == m and r[1] == N])) for N in sw["N_values"]]
        try:
            slopes.append(("N", m, rate_slope(np.log(sw["N_values"]), np.log(med))))
        except InsufficientPoints as e:
            log.warning("no N-slope at m=%d: %s", m, e)
            slopes.append(("N", m, None))
    return SweepResult(rows, slopes)


def cmd_rate_sweep(cfg: ExperimentConfig, seed: int, out: Path) -> SweepResult:
    res = run_rate_sweep(cfg, seed)
    sha = config_hash(cfg.text)
    write_csv(out / "sweep.csv", ["m", "N", "seed", "error"], res.rows, sha)
    write_csv(out / "slopes.csv", ["axis", "fixed", "slope"],
              [[a, f, "" if s is None else s] for a, f, s in res.slopes], sha)
    return res
