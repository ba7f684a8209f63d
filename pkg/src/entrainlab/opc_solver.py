"""Direct search for a gain of entrainment.

Every search here works on piecewise-constant controls on a uniform grid
and evaluates the normalized steady-state throughput exactly. If periodic
forcing could beat the constant control, one of these would find it:

* :func:`projected_ascent` -- finite-difference gradient ascent with
  projection onto the box and mean constraints, multi-restart;
* :func:`sample_objectives` -- Monte-Carlo over random feasible controls;
* :func:`bangbang_oracle` -- exhaustive phase grid over two-switch
  bang-bang controls.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from ._parallel import ordered_map
from .occupancy import periodic_orbit, throughput_batch
from .signals import (
    ControlBounds,
    MeanTargets,
    PeriodicControl,
    make_constant,
    project_rows,
    uniform_breakpoints,
)

__all__ = [
    "SolverConfig",
    "TraceRow",
    "OptimizationReport",
    "analytic_optimum",
    "objective",
    "fd_gradient",
    "tangent_gradient_norm",
    "random_feasible",
    "random_feasible_batch",
    "sample_objectives",
    "projected_ascent",
    "bangbang_values",
    "bangbang_oracle",
]


@dataclass(frozen=True)
class SolverConfig:
    n_pieces: int = 16
    max_iters: int = 300
    step_size: float = 0.05
    fd_epsilon: float = 1e-6
    tolerance: float = 1e-9
    seed: int = 0
    restarts: int = 20

    def __post_init__(self):
        if self.n_pieces < 1:
            raise ValueError("n_pieces must be at least 1")
        if self.max_iters < 0 or self.restarts < 0:
            raise ValueError("max_iters and restarts must be non-negative")
        for name in ("step_size", "fd_epsilon", "tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def analytic_optimum(means: MeanTargets) -> float:
    return means.mean0 / (means.mean0 + means.mean1)


def objective(ctrl: PeriodicControl) -> float:
    """Normalized average throughput of the periodic steady state."""
    return periodic_orbit(ctrl).throughput_normalized


def _objective_rows(v0, v1, dt):
    return throughput_batch(dt, v0, v1)


def fd_gradient(ctrl: PeriodicControl, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient of :func:`objective` w.r.t. piece values."""
    dt = ctrl.durations
    n = ctrl.n_pieces
    base = np.concatenate([ctrl.values0, ctrl.values1])
    pert = np.repeat(base[None, :], 4 * n, axis=0)
    idx = np.arange(2 * n)
    pert[idx, idx] += eps
    pert[2 * n + idx, idx] -= eps
    vals = _objective_rows(pert[:, :n], pert[:, n:], dt)
    g = (vals[: 2 * n] - vals[2 * n :]) / (2 * eps)
    return g[:n], g[n:]


def tangent_gradient_norm(ctrl: PeriodicControl, eps: float = 1e-6) -> float:
    """Norm of the gradient after removing its length-weighted mean per channel.

    For an interior control this is the gradient restricted to directions
    that keep both channel means fixed.
    """
    w = ctrl.durations / ctrl.period
    parts = []
    for g in fd_gradient(ctrl, eps):
        parts.append(g / w - np.dot(g / w, w))
    return float(np.linalg.norm(np.concatenate(parts) * np.sqrt(np.tile(w, 2))))


def random_feasible_batch(rng: np.random.Generator, bounds, means, n_pieces: int, n_samples: int):
    """Uniform box samples projected onto the mean constraints, per channel."""
    lo, hi = bounds.lower, bounds.upper
    lengths = np.ones(n_pieces)
    raw = rng.uniform(lo, hi, size=(2, n_samples, n_pieces))
    v0 = project_rows(raw[0], lengths, lo, hi, means.mean0)
    v1 = project_rows(raw[1], lengths, lo, hi, means.mean1)
    return v0, v1


def random_feasible(
    seed: int, bounds: ControlBounds, means: MeanTargets, T: float, n_pieces: int
) -> PeriodicControl:
    means.check_interior(bounds)
    rng = np.random.default_rng(seed)
    v0, v1 = random_feasible_batch(rng, bounds, means, n_pieces, 1)
    return PeriodicControl(T, uniform_breakpoints(T, n_pieces), v0[0], v1[0], bounds)


def sample_objectives(
    bounds: ControlBounds,
    means: MeanTargets,
    T: float,
    n_pieces: int,
    n_samples: int,
    seed: int,
    chunk: int = 10_000,
) -> np.ndarray:
    """Objective values of ``n_samples`` random feasible controls.

    Chunk ``j`` draws from ``default_rng([seed, j])``, so the result does not
    depend on the thread count.
    """
    means.check_interior(bounds)
    dt = np.diff(uniform_breakpoints(T, n_pieces))
    sizes = [min(chunk, n_samples - s) for s in range(0, n_samples, chunk)]

    def run(job):
        j, size = job
        rng = np.random.default_rng([seed, j])
        v0, v1 = random_feasible_batch(rng, bounds, means, n_pieces, size)
        return _objective_rows(v0, v1, dt)

    parts = ordered_map(run, list(enumerate(sizes)))
    return np.concatenate(parts) if parts else np.empty(0)


@dataclass(frozen=True)
class TraceRow:
    restart: int
    iteration: int
    objective: float
    step_norm: float
    accepted: bool


@dataclass
class OptimizationReport:
    best_control: PeriodicControl
    best_raw: float
    best_normalized: float
    analytic_optimum: float
    gain_of_entrainment: float
    constant_normalized: float
    restarts: int
    best_restart: int | None
    restart_values: list[float] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)
    trace: list[TraceRow] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "best_normalized": self.best_normalized,
            "best_raw": self.best_raw,
            "analytic_optimum": self.analytic_optimum,
            "gain_of_entrainment": self.gain_of_entrainment,
            "constant_normalized": self.constant_normalized,
            "restarts": self.restarts,
            "best_restart": self.best_restart,
            "restart_values": list(self.restart_values),
            "converged": list(self.converged),
            "best_control": self.best_control.to_dict(),
        }

    def trace_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(header)
        buf.write("restart,iteration,objective,step_norm,accepted\n")
        for r in self.trace:
            buf.write(f"{r.restart},{r.iteration},{r.objective!r},{r.step_norm!r},{int(r.accepted)}\n")
        return buf.getvalue()


def _ascend(v0, v1, dt, bounds, means, cfg: SolverConfig, restart: int):
    lo, hi = bounds.lower, bounds.upper
    n = v0.size
    trace = []
    J = float(_objective_rows(v0, v1, dt))
    trace.append(TraceRow(restart, 0, J, 0.0, True))
    step = cfg.step_size
    converged = False
    eps = cfg.fd_epsilon
    idx = np.arange(2 * n)
    for it in range(1, cfg.max_iters + 1):
        base = np.concatenate([v0, v1])
        pert = np.repeat(base[None, :], 4 * n, axis=0)
        pert[idx, idx] += eps
        pert[2 * n + idx, idx] -= eps
        vals = _objective_rows(pert[:, :n], pert[:, n:], dt)
        g = (vals[: 2 * n] - vals[2 * n :]) / (2 * eps)
        # backtrack until the projected step improves the objective
        while True:
            c0 = project_rows(v0 + step * g[:n], dt, lo, hi, means.mean0)
            c1 = project_rows(v1 + step * g[n:], dt, lo, hi, means.mean1)
            Jc = float(_objective_rows(c0, c1, dt))
            move = float(np.linalg.norm(np.concatenate([c0 - v0, c1 - v1])))
            if Jc > J:
                trace.append(TraceRow(restart, it, Jc, move, True))
                v0, v1, J = c0, c1, Jc
                step *= 1.5
                break
            trace.append(TraceRow(restart, it, J, move, False))
            step *= 0.5
            if step < 1e-12 or move < 1e-14:
                break
        if move <= cfg.tolerance or step < 1e-12:
            converged = True
            break
    return v0, v1, J, converged, trace


def projected_ascent(
    cfg: SolverConfig, bounds: ControlBounds, means: MeanTargets, T: float
) -> OptimizationReport:
    """Multi-restart projected gradient ascent on the piece values.

    Restart ``r`` starts from ``random_feasible(seed=[cfg.seed, r])``. The
    best restart wins, ties going to the lowest index. With zero restarts
    the report holds only the constant control.
    """
    means.check_interior(bounds)
    dt = np.diff(uniform_breakpoints(T, cfg.n_pieces))
    const = make_constant(T, bounds, means)
    const_orbit = periodic_orbit(const)
    optimum = analytic_optimum(means)

    def run(r):
        rng = np.random.default_rng([cfg.seed, r])
        v0, v1 = random_feasible_batch(rng, bounds, means, cfg.n_pieces, 1)
        return _ascend(v0[0], v1[0], dt, bounds, means, cfg, r)

    results = ordered_map(run, range(cfg.restarts))
    if not results:
        return OptimizationReport(
            best_control=const,
            best_raw=const_orbit.throughput_raw,
            best_normalized=const_orbit.throughput_normalized,
            analytic_optimum=optimum,
            gain_of_entrainment=const_orbit.throughput_normalized - optimum,
            constant_normalized=const_orbit.throughput_normalized,
            restarts=0,
            best_restart=None,
        )
    values = [res[2] for res in results]
    best = int(np.argmax(values))
    v0, v1, _, _, _ = results[best]
    ctrl = PeriodicControl(T, uniform_breakpoints(T, cfg.n_pieces), v0, v1, bounds)
    orbit = periodic_orbit(ctrl)
    trace = [row for res in results for row in res[4]]
    return OptimizationReport(
        best_control=ctrl,
        best_raw=orbit.throughput_raw,
        best_normalized=orbit.throughput_normalized,
        analytic_optimum=optimum,
        gain_of_entrainment=orbit.throughput_normalized - optimum,
        constant_normalized=const_orbit.throughput_normalized,
        restarts=cfg.restarts,
        best_restart=best,
        restart_values=values,
        converged=[res[3] for res in results],
        trace=trace,
    )


def _duty(mean, bounds):
    return (mean - bounds.lower) / (bounds.upper - bounds.lower)


def bangbang_values(bounds: ControlBounds, means: MeanTargets, T: float, phase_grid: int):
    """Objective of every two-switch bang-bang control on the phase grid.

    Channel ``i`` sits at ``upper`` on ``[s_i, s_i + theta_i T)`` (mod T) and
    at ``lower`` elsewhere, with duty cycle ``theta_i`` fixed by the mean.
    Phases ``s_i = j T / phase_grid``. Returns an array of shape
    ``(phase_grid, phase_grid)`` indexed by the two phase indices.
    """
    th0, th1 = _duty(means.mean0, bounds), _duty(means.mean1, bounds)
    if not (0 < th0 < 1 and 0 < th1 < 1):
        raise ValueError("duty cycles must lie in (0, 1)")
    g = int(phase_grid)
    s = np.arange(g) * T / g
    s0, s1 = np.meshgrid(s, s, indexing="ij")
    s0, s1 = s0.ravel(), s1.ravel()
    e0 = np.mod(s0 + th0 * T, T)
    e1 = np.mod(s1 + th1 * T, T)
    pts = np.column_stack([np.zeros_like(s0), s0, e0, s1, e1, np.full_like(s0, T)])
    pts = np.sort(pts, axis=1)
    dt = np.diff(pts, axis=1)
    mid = 0.5 * (pts[:, :-1] + pts[:, 1:])

    def level(start, theta):
        on = np.mod(mid - start[:, None], T) < theta * T
        return np.where(on, bounds.upper, bounds.lower)

    u0 = level(s0, th0)
    u1 = level(s1, th1)
    return _objective_rows(u0, u1, dt).reshape(g, g)


def bangbang_oracle(bounds: ControlBounds, means: MeanTargets, T: float, phase_grid: int) -> float:
    """Best objective over the bang-bang phase grid."""
    return float(np.max(bangbang_values(bounds, means, T, phase_grid)))


def report_json(report: OptimizationReport, extra: dict | None = None) -> str:
    d = report.to_dict()
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2)
