"""CSV serialization for datasets, clouds, potentials, loss logs and grid densities.

Every file has a header row and ends with a ``# densityflow <version> ...``
comment line. Floats are written with 17 significant digits so that a
round trip reproduces every value bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .core import FlowState, ParticleCloud, SnapshotDataset
from .eot import Segment
from .metrics import GridDensity


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


def config_hash(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode()
    return hashlib.sha256(text).hexdigest()


def trailer(config_sha: str | None = None, **extra) -> str:
    parts = [f"densityflow {__version__}"]
    if config_sha is not None:
        parts.append(f"config_sha256={config_sha}")
    parts += [f"{k}={fmt(v)}" for k, v in extra.items()]
    return "# " + " ".join(parts)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence], config_sha: str | None = None,
              **extra) -> Path:
    """Write rows atomically (via a temporary file) with a header and the metadata trailer."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    buf.write(trailer(config_sha, **extra) + "\n")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]], dict]:
    """Header, data rows (as strings) and the key=value pairs of the trailer comment."""
    lines = Path(path).read_text().splitlines()
    meta = {}
    body = []
    for line in lines:
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        raise ValueError(f"{path} has no header")
    return rows[0], rows[1:], meta


# snapshot datasets --------------------------------------------------------

def write_dataset(path: str | Path, data: SnapshotDataset, seed: int | None = None,
                  config_sha: str | None = None) -> Path:
    d = data.dim
    header = ["snapshot_index", "time", "obs_index"] + [f"x_{k + 1}" for k in range(d)]
    rows = ([j, data.times[j], i, *data.observations[j, i]] for j in range(data.m) for i in range(data.N))
    path = write_csv(path, header, rows, config_sha)
    meta = {"sigma": data.noise_sigma, "N": data.N, "m": data.m, "dim": d, "seed": seed,
            "times": list(data.times)}
    Path(path).with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path: str | Path) -> SnapshotDataset:
    path = Path(path)
    header, rows, _ = read_csv(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    d = len(header) - 3
    m, N = int(meta["m"]), int(meta["N"])
    obs = np.empty((m, N, d))
    times = [None] * m
    for r in rows:
        j, i = int(r[0]), int(r[2])
        times[j] = float(r[1])
        obs[j, i] = [float(v) for v in r[3:]]
    return SnapshotDataset(tuple(times), obs, float(meta["sigma"]))


# flow states ---------------------------------------------------------------

def write_flow_state(path: str | Path, state: FlowState, config_sha: str | None = None, **extra) -> Path:
    header = ["snapshot_index", "time", "particle_index"] + [f"x_{k + 1}" for k in range(state.dim)]
    rows = ([j, state.times[j], b, *state.clouds[j].points[b]]
            for j in range(state.m) for b in range(state.clouds[j].size))
    return write_csv(path, header, rows, config_sha, **extra)


def read_flow_state(path: str | Path) -> FlowState:
    header, rows, _ = read_csv(path)
    groups: dict[int, list] = {}
    times: dict[int, float] = {}
    for r in rows:
        j = int(r[0])
        times[j] = float(r[1])
        groups.setdefault(j, []).append((int(r[2]), [float(v) for v in r[3:]]))
    clouds = []
    for j in sorted(groups):
        pts = [p for _, p in sorted(groups[j])]
        clouds.append(ParticleCloud(np.array(pts)))
    return FlowState(tuple(clouds), tuple(times[j] for j in sorted(groups)))


def write_cloud(path: str | Path, cloud: ParticleCloud, time: float, config_sha: str | None = None) -> Path:
    header = ["time", "particle_index"] + [f"x_{k + 1}" for k in range(cloud.dim)]
    return write_csv(path, header, ([time, b, *cloud.points[b]] for b in range(cloud.size)), config_sha)


def read_cloud(path: str | Path) -> ParticleCloud:
    _, rows, _ = read_csv(path)
    return ParticleCloud(np.array([[float(v) for v in r[2:]] for r in rows]))


# potentials, losses, grids ---------------------------------------------------

def write_potentials(path: str | Path, segment: Segment, config_sha: str | None = None) -> Path:
    p = segment.potentials
    n = max(len(p.phi), len(p.psi))
    rows = ([i, p.phi[i] if i < len(p.phi) else "", p.psi[i] if i < len(p.psi) else ""] for i in range(n))
    return write_csv(path, ["atom_index", "phi", "psi"], rows, config_sha, epsilon=p.epsilon,
                     residual=p.marginal_residual, iterations=p.iterations)


LOSS_HEADER = ["iteration", "total_inner_iteration", "nll", "eot", "entropy", "total"]


def loss_rows(losses, inner_counts, iterations=None):
    iterations = range(len(losses)) if iterations is None else iterations
    for k, s, l in zip(iterations, inner_counts, losses):
        yield [k, s, l.neg_log_likelihood, l.eot_sum, l.entropy_sum, l.total]


def write_grid_density(path: str | Path, dens: GridDensity, config_sha: str | None = None) -> Path:
    axes = dens.grid.axes()
    if dens.grid.dim == 1:
        rows = ([i, axes[0][i], dens.values[i]] for i in range(dens.grid.cells))
        return write_csv(path, ["ix", "x", "value"], rows, config_sha)
    c = dens.grid.cells
    rows = ([i, k, axes[0][i], axes[1][k], dens.values[i, k]] for i in range(c) for k in range(c))
    return write_csv(path, ["ix", "iy", "x", "y", "value"], rows, config_sha)
