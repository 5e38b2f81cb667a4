"""INI experiment configuration with a strict schema (unknown or missing keys are errors)."""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .core import DensityFlowError


class ConfigError(DensityFlowError, ValueError):
    pass


REQUIRED = object()


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _mode(prefix: str, cast: Callable):
    """Values like ``fixed:500`` or ``theory``."""
    def parse(s: str):
        s = s.strip()
        if s == "theory":
            return ("theory", None)
        head, sep, tail = s.partition(":")
        if head != prefix or not sep:
            raise ValueError(f"expected 'theory' or '{prefix}:<value>', got {s!r}")
        return (prefix, cast(tail))
    return parse


def _times(s: str):
    s = s.strip()
    if s == "uniform":
        return "uniform"
    return tuple(float(v) for v in s.replace(",", " ").split())


def _particles(s: str):
    s = s.strip()
    return "N" if s == "N" else int(s)


@dataclass(frozen=True)
class Key:
    cast: Callable[[str], Any]
    default: Any = REQUIRED
    choices: tuple | None = None


SCHEMA: dict[str, dict[str, Key]] = {
    "experiment": {
        "seed": Key(int, 0),
    },
    "sde": {
        "potential": Key(str, REQUIRED, ("double_well", "double_well_s5", "ou")),
        "drift_sign": Key(float, -1.0),
        "dt": Key(float, 1e-3),
        "theta": Key(float, 1.0),
        "mu": Key(float, 0.0),
        "diffusion": Key(float, 1.0),
        "dim": Key(int, 1),
        "init_mean": Key(float, 0.0),
        "init_std": Key(float, 1.0),
    },
    "data": {
        "m": Key(int),
        "N": Key(int),
        "sigma": Key(float),
        "horizon": Key(float),
        "times": Key(_times, "uniform"),
    },
    "estimator": {
        "tau": Key(float),
        "lam": Key(float),
        "B": Key(_particles, "N"),
        "last_weight": Key(str, "horizon", ("horizon", "extrapolate")),
        "eot_tol": Key(float, 1e-8),
        "init": Key(str, "jittered-data", ("jittered-data",)),
    },
    "schedule": {
        "K": Key(int),
        "n_k": Key(_mode("fixed", int), ("theory", None)),
        "step": Key(_mode("fixed", float), ("theory", None)),
        "c_h": Key(float, 1.0),
        "c_n": Key(float, 1.0),
    },
    "baseline": {
        "enabled": Key(_bool, True),
        "total_iters": Key(int, 2000),
        "step": Key(float),
        "refresh": Key(int, 50),
        "anneal": Key(str, "log", ("log", "none")),
        "anneal_scale": Key(float, 100.0),
    },
    "outputs": {
        "directory": Key(str, "out"),
        "potentials": Key(_bool, False),
        "final_clouds": Key(_bool, True),
    },
    "sweep": {
        "m_values": Key(_int_list),
        "N_values": Key(_int_list),
        "seeds": Key(int, 10),
        "grid_cells": Key(int, 200),
        "lam_rule": Key(str, "fixed", ("fixed", "inverse_N")),
    },
}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^#;\s\[][^=:]*?)\s*[=:]")


def _line_index(text: str) -> tuple[dict, dict]:
    sections, keys = {}, {}
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            current = m.group(1).strip()
            sections.setdefault(current, n)
            continue
        m = _KEY_RE.match(line)
        if m and current is not None:
            keys.setdefault((current, m.group(1).strip()), n)
    return sections, keys


@dataclass(frozen=True)
class ExperimentConfig:
    """Parsed, typed configuration; ``values[section][key]``."""

    values: dict
    text: str
    source: str

    def section(self, name: str) -> dict:
        if name not in self.values:
            raise ConfigError(f"{self.source}: missing section [{name}]")
        return self.values[name]

    def has(self, name: str) -> bool:
        return name in self.values

    def require(self, *names: str) -> None:
        for n in names:
            self.section(n)

    def get(self, section: str, key: str):
        return self.section(section)[key]


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    sec_lines, key_lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="__defaults__",
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    values = {}
    for name in parser.sections():
        where = f"{source}:{sec_lines.get(name, '?')}"
        if name not in SCHEMA:
            raise ConfigError(f"{where}: unknown section [{name}] (known: {', '.join(SCHEMA)})")
        schema = SCHEMA[name]
        out = {}
        for key, raw in parser.items(name):
            line = key_lines.get((name, key), "?")
            if key not in schema:
                raise ConfigError(f"{source}:{line}: unknown key {name}.{key}")
            spec = schema[key]
            try:
                val = spec.cast(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{source}:{line}: bad value for {name}.{key}: {e}") from None
            if spec.choices is not None and val not in spec.choices:
                raise ConfigError(f"{source}:{line}: {name}.{key} must be one of {', '.join(spec.choices)}, "
                                  f"got {val!r}")
            out[key] = val
        for key, spec in schema.items():
            if key not in out:
                if spec.default is REQUIRED:
                    raise ConfigError(f"{where}: missing required key {name}.{key}")
                out[key] = spec.default
        values[name] = out
    return ExperimentConfig(values, text, source)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))
