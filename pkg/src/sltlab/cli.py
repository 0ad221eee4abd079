"""Command line front end.

    sltlab [--config FILE] [--KEY VALUE ...] COMMAND ...

Commands: ``geometry``, ``green``, ``capacity``, ``simulate``,
``experiment NAME`` and ``calibrate NAME``.  Configuration files are flat
``key = value`` text with ``#`` comments; flags override the file.  Exit
status is 0 on success, 2 when an experiment flag fails and 1 on error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (REGISTRY, SCHEMA_VERSION, ConfigError, ExperimentConfig, golden_key,
                          rep_rng, rep_seed, run)

OUT_DIR_ENV = "SLTLAB_OUT_DIR"
DEFAULT_OUT_DIR = "results"

# config key -> (ExperimentConfig field, parser)
KEYS = {
    "dim": ("d", int),
    "shape": ("shape", str),
    "r": ("r", int),
    "s": ("s", int),
    "u": ("u", float),
    "eps": ("eps", float),
    "u_prime": ("u_prime", float),
    "delta": ("delta", float),
    "reps": ("reps", int),
    "seed": ("seed", int),
    "r_big_factor": ("r_big_factor", float),
    "c4": ("c4", float),
    "mc_tol": ("mc_tol", float),
    "solver_tol": ("solver_tol", float),
    "max_bridge_attempts": ("max_bridge_attempts", int),
    "workers": ("workers", int),
    "b_exponent": ("b_exponent", float),
    "out_dir": (None, str),
}


class UnknownKeyError(ConfigError):
    def __init__(self, key: str):
        super().__init__(f"unknown configuration key {key!r}; known keys: {', '.join(sorted(KEYS))}")
        self.key = key


@dataclass
class RunConfig:
    experiment: ExperimentConfig
    out_dir: Path
    command: str | None = None
    args: dict = field(default_factory=dict)


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (t.strip() for t in line.split("=", 1))
        if k not in KEYS:
            raise UnknownKeyError(k)
        out[k] = v
    return out


def _convert(key: str, raw):
    _, typ = KEYS[key]
    if key == "u_prime" and str(raw).lower() in ("none", ""):
        return None
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(file=None, flags: dict | None = None) -> RunConfig:
    """Merge a config file and flag values (flags win) into a validated :class:`RunConfig`."""
    raw = read_config_file(file) if file is not None else {}
    for k, v in (flags or {}).items():
        if k not in KEYS:
            raise UnknownKeyError(k)
        if v is not None:
            raw[k] = v
    kw = {}
    out_dir = os.environ.get(OUT_DIR_ENV, DEFAULT_OUT_DIR)
    for k, v in raw.items():
        val = _convert(k, v)
        if k == "out_dir":
            out_dir = val
        else:
            kw[KEYS[k][0]] = val
    return RunConfig(ExperimentConfig(**kw), Path(out_dir))


def _points(text: str, d: int) -> np.ndarray:
    pts = [tuple(int(c) for c in chunk.split(",")) for chunk in text.split(";") if chunk.strip()]
    if any(len(p) != d for p in pts):
        raise ConfigError(f"every point needs {d} comma-separated coordinates")
    return np.array(pts, dtype=np.int64).reshape(-1, d)


def _emit(obj, out_path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text + "\n")


def cmd_geometry(rc: RunConfig, ns) -> int:
    from .geometry import build_geometry

    cfg = rc.experiment
    g = build_geometry(cfg.shape, cfg.r, cfg.s, cfg.d)
    _emit(g.describe(with_points=ns.with_points), rc.out_dir / "geometry.json" if ns.write else None)
    return 0


def cmd_green(rc: RunConfig, ns) -> int:
    from .potential import green_table

    d = rc.experiment.d
    offs = _points(ns.offsets, d)
    vals = green_table(d).values(offs)
    _emit({"d": d, "values": [{"offset": o.tolist(), "G": float(v)} for o, v in zip(offs, vals)]})
    return 0


def cmd_capacity(rc: RunConfig, ns) -> int:
    from .geometry import FiniteSet
    from .potential import capacity

    cfg = rc.experiment
    A = FiniteSet(_points(ns.points, cfg.d), cfg.d) if ns.points else FiniteSet.empty(cfg.d)
    rng = rep_rng(cfg.seed, "capacity", 0)
    kw = {"rng": rng, "r_big_factor": cfg.r_big_factor, "rel_tol": cfg.mc_tol} if ns.method == "mc_escape" else {}
    value, err = capacity(A, ns.method, **kw)
    _emit({"points": A.points.tolist(), "method": ns.method, "value": value, "error": err})
    return 0


def cmd_simulate(rc: RunConfig, ns) -> int:
    """Clotheslines at level ``u`` and their soft local time on the endpoint atoms."""
    from .clothesline import ClotheslineSampler
    from .endpoint_densities import expected_pair_counts, kernels_for
    from .slt_engine import endpoint_state

    cfg = rc.experiment
    kern = kernels_for(cfg.shape, cfg.r, cfg.s, cfg.d)
    sp = kern.space
    rng = rep_rng(cfg.seed, "simulate", 0)
    state = endpoint_state(kern, rep_seed(cfg.seed, "simulate", 1))
    sampler = ClotheslineSampler(kern)
    n = int(rng.poisson(cfg.u * kern.cap_v)) if cfg.u > 0 else 0
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    with open(rc.out_dir / "clotheslines.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["clothesline", "k", "w", "y"])
        for j in range(n):
            w, y = sampler.sample_indices(rng)
            for k, (wi, yi) in enumerate(zip(w, y)):
                state.step_source(int(wi), int(yi))
                wr.writerow([j, k, " ".join(map(str, sp.cols[wi])), " ".join(map(str, kern.ys[yi]))])
    G = state.pair_g()
    pi, _ = expected_pair_counts(kern)
    target = cfg.u * kern.cap_v * pi
    dev = np.abs(G - target) / target
    summary = {
        "config": cfg.to_dict(), "clotheslines": n, "steps": state.steps, "cap_v": kern.cap_v,
        "atoms": int(sp.size), "max_relative_deviation": float(dev.max()),
        "fraction_within_delta": float((dev <= cfg.delta).mean()), "g_theta": state.theta_g(),
    }
    _emit(summary, rc.out_dir / "simulate.json")
    return 0


def write_report(report, out_dir: Path) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{report.name}.csv"
    json_path = out_dir / f"{report.name}.json"
    csv_path.write_text(report.to_csv())
    json_path.write_text(report.to_json() + "\n")
    return csv_path, json_path


def cmd_experiment(rc: RunConfig, ns) -> int:
    report = run(ns.name, rc.experiment)
    csv_path, _ = write_report(report, rc.out_dir)
    for k, v in sorted(report.flags.items()):
        print(f"{'PASS' if v else 'FAIL'}  {k}")
    print(f"wrote {csv_path}")
    return 0 if report.passed else 2


def calibrate(name: str, cfg: ExperimentConfig, statistic: str = "frequency", z: float = 3.0) -> dict:
    """Pilot run of ``name``; threshold is the pilot frequency minus ``z`` standard errors, floored at 0."""
    report = run(name, cfg)
    value, se = report.summary[statistic]
    se = 0.0 if math.isnan(se) else se
    return {
        "key": golden_key(name, cfg, statistic),
        "entry": {"threshold": max(0.0, value - z * se), "pilot_value": value, "pilot_std_error": se,
                  "pilot_seed": cfg.seed, "pilot_reps": cfg.reps},
    }


def cmd_calibrate(rc: RunConfig, ns) -> int:
    out = calibrate(ns.name, rc.experiment, ns.statistic)
    path = Path(ns.golden)
    data = json.loads(path.read_text()) if path.is_file() else {"thresholds": {}}
    data["schema_version"] = SCHEMA_VERSION
    data.setdefault("thresholds", {})[out["key"]] = out["entry"]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    _emit(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sltlab", description="Soft local time experiments for random interlacements.")
    p.add_argument("--version", action="version", version=f"sltlab {__version__} (golden schema {SCHEMA_VERSION})")
    p.add_argument("--config", help="flat key = value configuration file")
    for key, (_, typ) in KEYS.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                       help=f"configuration key {key} ({typ.__name__})")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("geometry", help="describe the A1 / V / A2 triple")
    g.add_argument("--with-points", action="store_true")
    g.add_argument("--write", action="store_true", help="also write geometry.json to out_dir")
    gr = sub.add_parser("green", help="free Green function at offsets")
    gr.add_argument("--offsets", default="0,0,0", help="points separated by ';'")
    c = sub.add_parser("capacity", help="capacity of a finite set")
    c.add_argument("--points", default="0,0,0", help="points separated by ';'")
    c.add_argument("--method", default="last_exit_solve", choices=["last_exit_solve", "mc_escape"])
    sub.add_parser("simulate", help="clotheslines at level u and their soft local time")
    e = sub.add_parser("experiment", help="run a registered experiment")
    e.add_argument("name")
    cal = sub.add_parser("calibrate", help="pilot run writing a golden threshold")
    cal.add_argument("name")
    cal.add_argument("--statistic", default="frequency")
    cal.add_argument("--golden", default=str(Path(__file__).parent / "golden" / "thresholds.json"))
    return p


COMMANDS = {
    "geometry": cmd_geometry, "green": cmd_green, "capacity": cmd_capacity,
    "simulate": cmd_simulate, "experiment": cmd_experiment, "calibrate": cmd_calibrate,
}


def dispatch(rc: RunConfig, ns) -> int:
    return COMMANDS[rc.command](rc, ns)


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        flags = {k: getattr(ns, k) for k in KEYS}
        rc = parse_config(ns.config, flags)
        rc.command = ns.command
        if ns.command in ("experiment", "calibrate") and ns.name not in REGISTRY:
            raise ConfigError(f"unknown experiment {ns.name!r}; known: {', '.join(sorted(REGISTRY))}")
        return dispatch(rc, ns)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit status 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
