"""Cascades of occupancy stages and positive SISO linear blocks.

A linear block ``z' = A z + b w, y = c.z`` with Metzler, Hurwitz ``A`` and
nonnegative ``b, c`` maps nonnegative inputs to nonnegative outputs, and in
periodic steady state the output mean is ``H(0)`` times the input mean
(:func:`verify_prop9`).

Signals between stages stop being piecewise constant after the first
stage, so :func:`cascade_simulate` represents every interstage signal by its
exact average over each cell of a fine grid and doubles the grid until the
output mean settles. Averages are exact (closed-form cell integrals), so
every mean in the chain is preserved at any resolution.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from ._parallel import ordered_map
from .occupancy import _fixed_point, _integral_u1x, _path
from .signals import (
    ControlBounds,
    MeanTargets,
    PeriodicControl,
    project_rows,
    uniform_breakpoints,
)

__all__ = [
    "BlockError",
    "TopologyError",
    "LinearBlock",
    "BlockVerdict",
    "ScalarSignal",
    "LinearResponse",
    "OccupancyStage",
    "LinearStage",
    "CascadeTopology",
    "CascadeResult",
    "NoGainReport",
    "dc_gain",
    "check_metzler_hurwitz",
    "linear_steady_periodic",
    "verify_prop9",
    "random_metzler_hurwitz",
    "square_wave",
    "constant_composition",
    "cascade_simulate",
    "cascade_means_batch",
    "verify_no_gain_cascade",
]


class BlockError(ValueError):
    """A linear block violates its structural assumptions."""


class TopologyError(ValueError):
    """Malformed cascade description or an infeasible interstage signal."""


@dataclass(frozen=True, eq=False)
class LinearBlock:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float, ndmin=2)
        b = np.array(self.b, dtype=float).ravel()
        c = np.array(self.c, dtype=float).ravel()
        n = A.shape[0]
        if A.shape != (n, n) or b.shape != (n,) or c.shape != (n,):
            raise BlockError(f"inconsistent shapes A{A.shape}, b{b.shape}, c{c.shape}")
        for name, arr in (("A", A), ("b", b), ("c", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def to_dict(self) -> dict:
        return {"type": "linear", "A": self.A.tolist(), "b": self.b.tolist(), "c": self.c.tolist()}


@dataclass(frozen=True)
class BlockVerdict:
    metzler: bool
    hurwitz: bool
    nonnegative_io: bool
    leading_minors: tuple[float, ...]

    @property
    def ok(self) -> bool:
        return self.metzler and self.hurwitz and self.nonnegative_io


def check_metzler_hurwitz(blk: LinearBlock) -> BlockVerdict:
    """Metzler sign scan plus the leading-minor test on ``-A``.

    Gaussian elimination on ``-A`` without pivoting gives pivots whose running
    products are the leading principal minors; for a Metzler ``A`` all of
    them are positive exactly when ``A`` is Hurwitz. Elimination stops at the
    first non-positive pivot.
    """
    A = blk.A
    off = A[~np.eye(blk.n, dtype=bool)]
    metzler = bool(np.all(off >= 0))
    M = -A.copy()
    minors = []
    det = 1.0
    for k in range(blk.n):
        pivot = M[k, k]
        det *= pivot
        minors.append(float(det))
        if not pivot > 0:
            break
        M[k + 1 :, k:] -= np.outer(M[k + 1 :, k] / pivot, M[k, k:])
    hurwitz = metzler and len(minors) == blk.n and all(m > 0 for m in minors)
    nonneg = bool(np.all(blk.b >= 0) and np.all(blk.c >= 0))
    return BlockVerdict(metzler, hurwitz, nonneg, tuple(minors))


def dc_gain(blk: LinearBlock) -> float:
    """``H(0) = -c^T A^{-1} b``."""
    try:
        x = np.linalg.solve(blk.A, blk.b)
    except np.linalg.LinAlgError:
        raise BlockError("A is singular, so the block is not Hurwitz") from None
    return float(-blk.c @ x)


def _require_positive_block(blk: LinearBlock) -> None:
    v = check_metzler_hurwitz(blk)
    if not v.ok:
        raise BlockError(
            f"block must be Metzler, Hurwitz with nonnegative b, c (got metzler={v.metzler}, "
            f"hurwitz={v.hurwitz}, nonnegative_io={v.nonnegative_io})"
        )


def random_metzler_hurwitz(rng: np.random.Generator, n: int, density: float = 0.7) -> LinearBlock:
    """Random strictly diagonally dominant Metzler block with positive b, c."""
    off = rng.uniform(0.0, 1.0, (n, n)) * (rng.uniform(size=(n, n)) < density)
    np.fill_diagonal(off, 0.0)
    A = off - np.diag(off.sum(axis=1) + rng.uniform(0.2, 2.0, n))
    return LinearBlock(A, rng.uniform(0.1, 1.0, n), rng.uniform(0.1, 1.0, n))


@dataclass(frozen=True, eq=False)
class ScalarSignal:
    """T-periodic piecewise-constant scalar signal."""

    period: float
    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.array(self.breakpoints, dtype=float)
        v = np.array(self.values, dtype=float)
        if bp[0] != 0.0 or bp[-1] != self.period or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must increase strictly from 0 to the period")
        if v.shape != (bp.size - 1,):
            raise ValueError("need one value per piece")
        bp.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", v)

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def mean(self) -> float:
        return float(np.dot(self.values, self.durations) / self.period)


def square_wave(T: float, low: float, high: float, duty: float, phase: float = 0.0) -> ScalarSignal:
    """``high`` on ``[phase, phase + duty T)`` mod T, ``low`` elsewhere."""
    a = np.mod(phase, T)
    b = np.mod(phase + duty * T, T)
    pts = np.unique(np.array([0.0, a, b, T]))
    mid = 0.5 * (pts[:-1] + pts[1:])
    on = np.mod(mid - a, T) < duty * T
    return ScalarSignal(T, pts, np.where(on, high, low))


_MATS: dict = {}


def _step_matrices(A: np.ndarray, h: float):
    """``Phi = e^{Ah}``, ``Psi1 = int_0^h e^{As} ds`` and
    ``Psi2 = int_0^h (h - s) e^{As} ds`` from one block exponential."""
    key = (A.tobytes(), float(h))
    hit = _MATS.get(key)
    if hit is not None:
        return hit
    n = A.shape[0]
    M = np.zeros((3 * n, 3 * n))
    M[:n, :n] = A
    M[:n, n : 2 * n] = np.eye(n)
    M[n : 2 * n, 2 * n :] = np.eye(n)
    E = expm(M * h)
    out = (E[:n, :n], E[:n, n : 2 * n], E[:n, 2 * n :])
    if len(_MATS) > 4096:
        _MATS.clear()
    _MATS[key] = out
    return out


def _linear_cells(blk: LinearBlock, dt: np.ndarray, w: np.ndarray):
    """Periodic response to cellwise-constant input ``w`` of shape ``(B, M)``.

    Returns the state at cell starts ``(B, M + 1, n)`` and the exact cell
    integrals of ``y`` ``(B, M)``.
    """
    A, b, c = blk.A, blk.b, blk.c
    n = blk.n
    B, M = w.shape
    mats = [_step_matrices(A, h) for h in dt]
    Phi_T = np.eye(n)
    z = np.zeros((B, n))
    for (Phi, Psi1, _), wi in zip(mats, w.T):
        z = z @ Phi.T + wi[:, None] * (Psi1 @ b)[None, :]
        Phi_T = Phi @ Phi_T
    # z(0) = Phi_T z(0) + forcing
    z0 = np.linalg.solve(np.eye(n) - Phi_T, z.T).T
    states = np.empty((B, M + 1, n))
    states[:, 0] = z0
    integ = np.empty((B, M))
    z = z0
    for i, ((Phi, Psi1, Psi2), wi) in enumerate(zip(mats, w.T)):
        integ[:, i] = (z @ Psi1.T + wi[:, None] * (Psi2 @ b)[None, :]) @ c
        z = z @ Phi.T + wi[:, None] * (Psi1 @ b)[None, :]
        states[:, i + 1] = z
    return states, integ


@dataclass(frozen=True, eq=False)
class LinearResponse:
    block: LinearBlock
    signal: ScalarSignal
    states: np.ndarray
    cell_integrals: np.ndarray

    @property
    def period_residual(self) -> float:
        return float(np.max(np.abs(self.states[-1] - self.states[0])))

    @property
    def mean_output(self) -> float:
        return float(self.cell_integrals.sum() / self.signal.period)

    @property
    def cell_averages(self) -> np.ndarray:
        return self.cell_integrals / self.signal.durations

    def evaluate(self, t) -> np.ndarray:
        sig = self.signal
        tt = np.mod(np.atleast_1d(np.asarray(t, dtype=float)), sig.period)
        idx = np.clip(np.searchsorted(sig.breakpoints, tt, side="right") - 1, 0, sig.values.size - 1)
        out = np.empty(tt.shape)
        A, b, c = self.block.A, self.block.b, self.block.c
        for j, (i, s) in enumerate(zip(idx, tt - sig.breakpoints[idx])):
            Phi, Psi1, _ = _step_matrices(A, float(s))
            out[j] = c @ (Phi @ self.states[i] + Psi1 @ b * sig.values[i])
        return out


def linear_steady_periodic(blk: LinearBlock, w: ScalarSignal, T: float | None = None) -> LinearResponse:
    """Steady-state periodic response of a Hurwitz block to ``w``.

    Each piece is propagated exactly with the block exponential; the initial
    state solves ``(I - Phi_T) z0 = forcing``.
    """
    if T is not None and T != w.period:
        raise ValueError("signal period does not match T")
    if not check_metzler_hurwitz(blk).hurwitz:
        eig = np.linalg.eigvals(blk.A)
        if np.any(eig.real >= 0):
            raise BlockError("A is not Hurwitz")
    states, integ = _linear_cells(blk, w.durations, w.values[None, :])
    return LinearResponse(blk, w, states[0], integ[0])


def verify_prop9(blk: LinearBlock, w: ScalarSignal, T: float | None = None) -> float:
    """Relative gap between ``mean(y)`` and ``H(0) mean(w)``.

    Falls back to the absolute gap when ``H(0) mean(w)`` is zero.
    """
    resp = linear_steady_periodic(blk, w, T)
    target = dc_gain(blk) * w.mean
    gap = abs(resp.mean_output - target)
    return gap / abs(target) if target != 0 else gap


# --- cascades -------------------------------------------------------------


@dataclass(frozen=True)
class OccupancyStage:
    """Occupancy stage; its output is ``u1 x`` with ``u1`` the external outflow."""

    def to_dict(self):
        return {"type": "occupancy"}


@dataclass(frozen=True, eq=False)
class LinearStage:
    block: LinearBlock

    def to_dict(self):
        return self.block.to_dict()


WIRINGS = {
    # occupancy(u0, u1) -> y -> linear -> w1 -> occupancy(w1, u1) -> w2
    "fig1a": (("u0", "prev", "prev"), ("occupancy", "linear", "occupancy"), ("y", "w1", "w2")),
    # linear(u0) -> w1 -> occupancy(w1, u1) -> w2
    "fig1b": (("u0", "prev"), ("linear", "occupancy"), ("w1", "w2")),
}


@dataclass(frozen=True, eq=False)
class CascadeTopology:
    """Ordered stages with one input source per stage (``"u0"`` or ``"prev"``)."""

    stages: tuple
    sources: tuple[str, ...]
    names: tuple[str, ...]
    wiring: str = "explicit"

    def __post_init__(self):
        if not self.stages:
            raise TopologyError("a cascade needs at least one stage")
        if len(self.sources) != len(self.stages) or len(self.names) != len(self.stages):
            raise TopologyError("one source and one signal name per stage")
        if self.sources[0] != "u0":
            raise TopologyError("the first stage must be driven by u0")
        for s in self.sources:
            if s not in ("u0", "prev"):
                raise TopologyError(f"unknown source {s!r}")
        for st in self.stages:
            if not isinstance(st, (OccupancyStage, LinearStage)):
                raise TopologyError(f"unknown stage {st!r}")
            if isinstance(st, LinearStage):
                _require_positive_block(st.block)

    @classmethod
    def fig1a(cls, blk: LinearBlock) -> "CascadeTopology":
        src, _, names = WIRINGS["fig1a"]
        return cls((OccupancyStage(), LinearStage(blk), OccupancyStage()), src, names, "fig1a")

    @classmethod
    def fig1b(cls, blk: LinearBlock) -> "CascadeTopology":
        src, _, names = WIRINGS["fig1b"]
        return cls((LinearStage(blk), OccupancyStage()), src, names, "fig1b")

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeTopology":
        try:
            raw_stages = d["stages"]
        except (KeyError, TypeError):
            raise TopologyError("topology needs a 'stages' list") from None
        stages = []
        for i, s in enumerate(raw_stages):
            kind = s.get("type") if isinstance(s, dict) else None
            if kind == "occupancy":
                stages.append(OccupancyStage())
            elif kind == "linear":
                try:
                    stages.append(LinearStage(LinearBlock(s["A"], s["b"], s["c"])))
                except KeyError as exc:
                    raise TopologyError(f"stage {i}: missing {exc.args[0]!r}") from None
            else:
                raise TopologyError(f"stage {i}: unknown type {kind!r}")
        wiring = d.get("wiring", "fig1a")
        if isinstance(wiring, str):
            if wiring not in WIRINGS:
                raise TopologyError(f"unknown wiring {wiring!r}")
            src, kinds, names = WIRINGS[wiring]
            got = tuple("linear" if isinstance(s, LinearStage) else "occupancy" for s in stages)
            if got != kinds:
                raise TopologyError(f"wiring {wiring!r} expects stages {list(kinds)}, got {list(got)}")
            return cls(tuple(stages), src, names, wiring)
        if isinstance(wiring, dict):
            src = tuple(wiring.get("sources", ()))
            names = tuple(wiring.get("names", [f"s{i + 1}" for i in range(len(stages))]))
            return cls(tuple(stages), src, names, "explicit")
        raise TopologyError("wiring must be a name or a mapping")

    @classmethod
    def from_json(cls, text: str) -> "CascadeTopology":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TopologyError(f"invalid JSON: {exc}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        wiring = self.wiring if self.wiring in WIRINGS else {"sources": list(self.sources), "names": list(self.names)}
        return {"stages": [s.to_dict() for s in self.stages], "wiring": wiring}


def constant_composition(topo: CascadeTopology, means: MeanTargets) -> dict[str, float]:
    """Steady-state value of every stage output under constant inputs."""
    out = {}
    prev = None
    for st, src, name in zip(topo.stages, topo.sources, topo.names):
        inp = means.mean0 if src == "u0" else prev
        if isinstance(st, OccupancyStage):
            prev = means.mean1 * inp / (inp + means.mean1)
        else:
            prev = dc_gain(st.block) * inp
        out[name] = prev
    return out


def _run_cells(topo: CascadeTopology, dt: np.ndarray, u0: np.ndarray, u1: np.ndarray):
    """Cell averages of every stage output for a batch on a common grid."""
    signals = {}
    prev = None
    for k, (st, src, name) in enumerate(zip(topo.stages, topo.sources, topo.names)):
        inp = u0 if src == "u0" else prev
        if isinstance(st, OccupancyStage):
            if not np.all(inp > 0):
                raise TopologyError(f"stage {k} ({name}): inflow leaves (0, inf)")
            if not np.all(u1 > 0):
                raise TopologyError(f"stage {k} ({name}): outflow must be positive")
            x0 = _fixed_point(dt, inp, u1)
            path = _path(x0, dt, inp, u1)
            prev = _integral_u1x(path, dt, inp, u1) / dt
        else:
            _, integ = _linear_cells(st.block, dt, inp)
            prev = integ / dt
        signals[name] = prev
    return signals


def _refine_grid(breakpoints: np.ndarray, T: float, cells: int) -> np.ndarray:
    grid = np.linspace(0.0, T, cells + 1)
    grid[-1] = T
    return np.unique(np.concatenate([grid, breakpoints]))


def _controls_on_grid(bp, v0, v1, grid):
    mid = 0.5 * (grid[:-1] + grid[1:])
    idx = np.clip(np.searchsorted(bp, mid, side="right") - 1, 0, v0.shape[-1] - 1)
    return v0[..., idx], v1[..., idx]


@dataclass
class CascadeResult:
    grid: np.ndarray
    signals: dict[str, np.ndarray]
    means: dict[str, float]
    cells: int
    converged: bool
    history: list[float] = field(default_factory=list)

    @property
    def output_mean(self) -> float:
        return list(self.means.values())[-1]

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(header)
        names = list(self.signals)
        buf.write(",".join(["t"] + names) + "\n")
        for i, t in enumerate(self.grid[:-1]):
            buf.write(",".join([repr(float(t))] + [repr(float(self.signals[n][i])) for n in names]) + "\n")
        return buf.getvalue()


def cascade_simulate(
    topo: CascadeTopology,
    ctrl: PeriodicControl,
    convergence_tol: float = 1e-9,
    base_cells: int = 1024,
    max_cells: int = 1 << 17,
) -> CascadeResult:
    """Steady-state periodic signals of a cascade under one control.

    Signals are cell averages on a grid of ``base_cells`` uniform cells merged
    with the control breakpoints; the grid doubles until the final output
    mean moves by less than ``convergence_tol`` (or ``max_cells`` is hit,
    reported as ``converged=False``).
    """
    T = ctrl.period
    cells = base_cells
    history = []
    prev_mean = None
    while True:
        grid = _refine_grid(ctrl.breakpoints, T, cells)
        dt = np.diff(grid)
        u0, u1 = _controls_on_grid(ctrl.breakpoints, ctrl.values0, ctrl.values1, grid)
        sig = _run_cells(topo, dt, u0[None, :], u1[None, :])
        sig = {k: v[0] for k, v in sig.items()}
        means = {k: float(np.dot(v, dt) / T) for k, v in sig.items()}
        out = list(means.values())[-1]
        history.append(out)
        converged = prev_mean is not None and abs(out - prev_mean) < convergence_tol
        if converged or cells * 2 > max_cells:
            return CascadeResult(grid, sig, means, cells, converged, history)
        prev_mean = out
        cells *= 2


def cascade_means_batch(
    topo: CascadeTopology,
    breakpoints: np.ndarray,
    v0: np.ndarray,
    v1: np.ndarray,
    T: float,
    cells: int = 1024,
) -> np.ndarray:
    """Final-output means for a batch of controls sharing breakpoints, at a
    fixed resolution."""
    grid = _refine_grid(np.asarray(breakpoints, dtype=float), T, cells)
    dt = np.diff(grid)
    u0, u1 = _controls_on_grid(breakpoints, np.atleast_2d(v0), np.atleast_2d(v1), grid)
    sig = _run_cells(topo, dt, u0, u1)
    last = list(sig.values())[-1]
    return last @ dt / T


@dataclass
class NoGainReport:
    constant_mean: float
    composition_mean: float
    best_sampled_mean: float | None
    best_ascent_mean: float | None
    gap: float | None
    n_samples: int
    cells: int
    assumptions: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "constant_mean": self.constant_mean,
            "composition_mean": self.composition_mean,
            "best_sampled_mean": self.best_sampled_mean,
            "best_ascent_mean": self.best_ascent_mean,
            "gap": self.gap,
            "n_samples": self.n_samples,
            "cells": self.cells,
            "assumptions": list(self.assumptions),
        }


def _cascade_ascent(topo, bounds, means, T, n_pieces, cells, rng, iters, eps=1e-6):
    """Short projected FD ascent on the cascade output mean."""
    bp = uniform_breakpoints(T, n_pieces)
    dt = np.diff(bp)
    lo, hi = bounds.lower, bounds.upper
    v0 = project_rows(rng.uniform(lo, hi, n_pieces), dt, lo, hi, means.mean0)
    v1 = project_rows(rng.uniform(lo, hi, n_pieces), dt, lo, hi, means.mean1)

    def f(a, b):
        return cascade_means_batch(topo, bp, a, b, T, cells)

    J = float(f(v0, v1)[0])
    step = 0.05
    n = n_pieces
    idx = np.arange(2 * n)
    for _ in range(iters):
        base = np.concatenate([v0, v1])
        pert = np.repeat(base[None, :], 4 * n, axis=0)
        pert[idx, idx] += eps
        pert[2 * n + idx, idx] -= eps
        vals = f(pert[:, :n], pert[:, n:])
        g = (vals[: 2 * n] - vals[2 * n :]) / (2 * eps)
        for _ in range(30):
            c0 = project_rows(v0 + step * g[:n], dt, lo, hi, means.mean0)
            c1 = project_rows(v1 + step * g[n:], dt, lo, hi, means.mean1)
            Jc = float(f(c0, c1)[0])
            if Jc > J:
                v0, v1, J = c0, c1, Jc
                step *= 1.5
                break
            step *= 0.5
    return J


def verify_no_gain_cascade(
    topo: CascadeTopology,
    bounds: ControlBounds,
    means: MeanTargets,
    T: float,
    n_samples: int,
    seed: int,
    n_pieces: int = 16,
    cells: int = 1024,
    ascent_restarts: int = 0,
    ascent_iters: int = 40,
    chunk: int = 2000,
) -> NoGainReport:
    """Search random and ascent-improved periodic inputs for a cascade gain.

    All candidates (and the constant reference) are evaluated at the same
    fixed resolution so they are compared like for like.
    """
    means.check_interior(bounds)
    bp = uniform_breakpoints(T, n_pieces)
    const_mean = float(
        cascade_means_batch(topo, bp, np.full(n_pieces, means.mean0), np.full(n_pieces, means.mean1), T, cells)[0]
    )
    composition = list(constant_composition(topo, means).values())[-1]
    assumptions = [
        f"wiring {topo.wiring}: occupancy stages take outflow u1 and emit u1 x",
        "linear blocks are Metzler, Hurwitz, with nonnegative b and c",
        f"interstage signals as exact cell averages on {cells} cells per period",
    ]
    best_sample = None
    if n_samples > 0:
        sizes = [min(chunk, n_samples - s) for s in range(0, n_samples, chunk)]
        lengths = np.ones(n_pieces)

        def run(job):
            j, size = job
            rng = np.random.default_rng([seed, j])
            raw = rng.uniform(bounds.lower, bounds.upper, (2, size, n_pieces))
            v0 = project_rows(raw[0], lengths, bounds.lower, bounds.upper, means.mean0)
            v1 = project_rows(raw[1], lengths, bounds.lower, bounds.upper, means.mean1)
            return cascade_means_batch(topo, bp, v0, v1, T, cells)

        best_sample = float(max(np.max(p) for p in ordered_map(run, list(enumerate(sizes)))))
    best_ascent = None
    if ascent_restarts > 0:
        vals = ordered_map(
            lambda r: _cascade_ascent(
                topo, bounds, means, T, n_pieces, cells, np.random.default_rng([seed, 10_000 + r]), ascent_iters
            ),
            range(ascent_restarts),
        )
        best_ascent = float(max(vals))
    found = [v for v in (best_sample, best_ascent) if v is not None]
    gap = max(found) - const_mean if found else None
    return NoGainReport(const_mean, composition, best_sample, best_ascent, gap, n_samples, cells, assumptions)
