"""Command-line experiments.

    entrainlab simulate  --config cfg.json --control ctrl.json --out DIR
    entrainlab optimize  --config cfg.json --out DIR
    entrainlab pmp-check --config cfg.json --control ctrl.json --out DIR
    entrainlab cascade   --config cfg.json --out DIR
    entrainlab prop9     --config cfg.json --out DIR

Exit codes: 0 success, 2 invalid input (a JSON error object goes to
stderr), 3 a no-gain property was violated beyond tolerance.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .cascade import (
    BlockError,
    CascadeTopology,
    TopologyError,
    cascade_simulate,
    constant_composition,
    dc_gain,
    linear_steady_periodic,
    random_metzler_hurwitz,
    square_wave,
    verify_no_gain_cascade,
    verify_prop9,
)
from .occupancy import periodic_orbit, poincare_map_coefficients, trajectory_csv
from .opc_solver import SolverConfig, analytic_optimum, projected_ascent
from .pmp import verify_extremal
from .signals import ControlBounds, ControlError, MeanTargets, PeriodicControl, channel_mean, make_constant

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ALARM = 3

NORMALIZATION_NOTE = (
    "throughput_normalized = mean(u1 x1) / mean(u1); at the constant optimum it equals "
    "mean0 / (mean0 + mean1), while throughput_raw equals mean0 mean1 / (mean0 + mean1)"
)


class InputError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class ExperimentConfig:
    bounds: ControlBounds = field(default_factory=lambda: ControlBounds(0.1, 0.9))
    means: MeanTargets = field(default_factory=lambda: MeanTargets(0.3, 0.6))
    period: float = 10.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    topology: str | None = None
    out: str = "out"
    seed: int = 0
    tolerance: float = 1e-9
    cascade_samples: int = 10_000
    cascade_cells: int = 1024
    cascade_tolerance: float = 1e-8
    prop9_blocks: int = 100
    prop9_max_dim: int = 4
    prop9_tolerance: float = 1e-8
    points_per_period: int = 1000

    def validate(self) -> None:
        self.means.check_interior(self.bounds)
        if not self.period > 0:
            raise ControlError("period must be positive")
        if self.cascade_samples < 0 or self.prop9_blocks < 0:
            raise ControlError("sample counts must be non-negative")
        if self.points_per_period < 1:
            raise ControlError("points_per_period must be positive")

    def to_dict(self) -> dict:
        d = {
            "bounds": [self.bounds.lower, self.bounds.upper],
            "means": [self.means.mean0, self.means.mean1],
            "period": self.period,
            "solver": {f.name: getattr(self.solver, f.name) for f in fields(SolverConfig)},
            "topology": self.topology,
            "seed": self.seed,
            "tolerance": self.tolerance,
            "cascade_samples": self.cascade_samples,
            "cascade_cells": self.cascade_cells,
            "cascade_tolerance": self.cascade_tolerance,
            "prop9_blocks": self.prop9_blocks,
            "prop9_max_dim": self.prop9_max_dim,
            "prop9_tolerance": self.prop9_tolerance,
            "points_per_period": self.points_per_period,
        }
        return d

    @property
    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise InputError("validation", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError("validation", f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "bounds" in kw:
                lo, hi = kw["bounds"]
                kw["bounds"] = ControlBounds(float(lo), float(hi))
            if "means" in kw:
                m0, m1 = kw["means"]
                kw["means"] = MeanTargets(float(m0), float(m1))
            if "solver" in kw:
                kw["solver"] = SolverConfig(**kw["solver"])
            cfg = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise InputError("validation", str(exc)) from None
        return cfg


def _read_json(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError("io", f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError("parse", f"{path}: {exc}") from None


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Outputs:
    def __init__(self, cfg: ExperimentConfig, command: str):
        self.dir = Path(cfg.out)
        self.meta = {"config_hash": cfg.digest, "version": __version__, "command": command}
        self.written: list[str] = []

    def json(self, name: str, payload: dict) -> Path:
        p = self.dir / name
        _write_atomic(p, json.dumps({"meta": self.meta, **payload}, indent=2, sort_keys=False) + "\n")
        self.written.append(str(p))
        return p

    @property
    def csv_header(self) -> str:
        return f"# config_hash={self.meta['config_hash']} version={__version__} command={self.meta['command']}\n"

    def csv(self, name: str, text: str) -> Path:
        p = self.dir / name
        _write_atomic(p, text)
        self.written.append(str(p))
        return p


def _load_config(args) -> ExperimentConfig:
    d = _read_json(args.config) if args.config else {}
    cfg = ExperimentConfig.from_dict(d)
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.solver = SolverConfig(**{**{f.name: getattr(cfg.solver, f.name) for f in fields(SolverConfig)}, "seed": args.seed})
    if args.tolerance is not None:
        cfg.tolerance = args.tolerance
    try:
        cfg.validate()
    except ValueError as exc:
        raise InputError("validation", str(exc)) from None
    return cfg


def _load_control(path: str | None, cfg: ExperimentConfig, check_means: bool) -> PeriodicControl:
    if path is None:
        return make_constant(cfg.period, cfg.bounds, cfg.means)
    d = _read_json(path)
    try:
        ctrl = PeriodicControl.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise InputError("validation", str(exc)) from None
    if check_means:
        for ch, target in enumerate(cfg.means):
            got = channel_mean(ctrl, ch)
            if abs(got - target) > 1e-9 * max(1.0, abs(target)):
                raise InputError("validation", f"channel {ch} mean {got!r} differs from target {target!r}")
    return ctrl


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    ctrl = _load_control(args.control, cfg, check_means=False)
    orbit = periodic_orbit(ctrl)
    alpha, beta = poincare_map_coefficients(ctrl)
    out = _Outputs(cfg, "simulate")
    out.csv("trajectory.csv", trajectory_csv(orbit, cfg.points_per_period, out.csv_header))
    out.json(
        "orbit.json",
        {
            "initial": orbit.initial,
            "throughput_raw": orbit.throughput_raw,
            "throughput_normalized": orbit.throughput_normalized,
            "mean0": channel_mean(ctrl, 0),
            "mean1": channel_mean(ctrl, 1),
            "alpha": alpha,
            "beta": beta,
            "periodicity_residual": orbit.periodicity_residual,
            "normalization_note": NORMALIZATION_NOTE,
        },
    )
    return EXIT_OK


def cmd_optimize(cfg: ExperimentConfig, args) -> int:
    report = projected_ascent(cfg.solver, cfg.bounds, cfg.means, cfg.period)
    out = _Outputs(cfg, "optimize")
    trace = out.csv("trace.csv", report.trace_csv(out.csv_header))
    payload = report.to_dict()
    payload["trace_file"] = trace.name
    payload["tolerance"] = cfg.tolerance
    payload["normalization_note"] = NORMALIZATION_NOTE
    out.json("report.json", payload)
    return EXIT_ALARM if report.gain_of_entrainment > cfg.tolerance else EXIT_OK


def cmd_pmp_check(cfg: ExperimentConfig, args) -> int:
    ctrl = _load_control(args.control, cfg, check_means=True)
    cert = verify_extremal(ctrl)
    out = _Outputs(cfg, "pmp-check")
    out.csv("switching.csv", cert.record.to_csv(out.csv_header))
    out.json("certificate.json", cert.to_dict())
    return EXIT_OK


def _topology(cfg: ExperimentConfig) -> CascadeTopology:
    if cfg.topology is None:
        blk = random_metzler_hurwitz(np.random.default_rng([cfg.seed, 7]), 2)
        return CascadeTopology.fig1a(blk)
    d = _read_json(cfg.topology)
    try:
        return CascadeTopology.from_dict(d)
    except (TopologyError, BlockError, TypeError, ValueError) as exc:
        raise InputError("validation", f"topology: {exc}") from None


def cmd_cascade(cfg: ExperimentConfig, args) -> int:
    topo = _topology(cfg)
    const = make_constant(cfg.period, cfg.bounds, cfg.means)
    try:
        sim = cascade_simulate(topo, const)
        rep = verify_no_gain_cascade(
            topo, cfg.bounds, cfg.means, cfg.period, cfg.cascade_samples, cfg.seed,
            n_pieces=cfg.solver.n_pieces, cells=cfg.cascade_cells,
        )
    except TopologyError as exc:
        raise InputError("validation", str(exc)) from None
    out = _Outputs(cfg, "cascade")
    out.csv("signals.csv", sim.to_csv(out.csv_header))
    payload = {
        "topology": topo.to_dict(),
        "constant_input_means": sim.means,
        "constant_composition": constant_composition(topo, cfg.means),
        "refinement": {"cells": sim.cells, "converged": sim.converged, "history": sim.history},
        "no_gain": rep.to_dict(),
        "tolerance": cfg.cascade_tolerance,
    }
    out.json("cascade.json", payload)
    return EXIT_ALARM if rep.gap is not None and rep.gap > cfg.cascade_tolerance else EXIT_OK


def cmd_prop9(cfg: ExperimentConfig, args) -> int:
    rng = np.random.default_rng([cfg.seed, 9])
    rows = []
    T = cfg.period
    for i in range(cfg.prop9_blocks):
        n = int(rng.integers(1, cfg.prop9_max_dim + 1))
        blk = random_metzler_hurwitz(rng, n)
        lo = float(rng.uniform(0.0, 1.0))
        w = square_wave(T, lo, lo + float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.05, 0.95)), float(rng.uniform(0, T)))
        resp = linear_steady_periodic(blk, w)
        rows.append(
            {
                "block": i,
                "n": n,
                "dc_gain": dc_gain(blk),
                "mean_w": w.mean,
                "mean_y": resp.mean_output,
                "relative_residual": verify_prop9(blk, w),
            }
        )
    worst = max((r["relative_residual"] for r in rows), default=0.0)
    out = _Outputs(cfg, "prop9")
    out.json("prop9.json", {"blocks": rows, "max_relative_residual": worst, "tolerance": cfg.prop9_tolerance})
    return EXIT_ALARM if worst > cfg.prop9_tolerance else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "pmp-check": cmd_pmp_check,
    "cascade": cmd_cascade,
    "prop9": cmd_prop9,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="entrainlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--tolerance", type=float)
        if name in ("simulate", "pmp-check"):
            sp.add_argument("--control", help="control file (JSON); default is the constant control")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except InputError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
