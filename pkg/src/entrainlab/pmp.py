"""Maximum-principle certificates for the occupancy problem.

The co-state obeys ``p1' = (u0 + u1) p1 - w u1`` with constant ``p2, p3``.
We use the cost weight ``w = 1`` throughout; this is the multiplier
``p0 = T / mean(u1)`` after the whole co-state vector is rescaled by
``mean(u1)``, which leaves every sign condition unchanged. The switching
functions are

    phi0 = p1 (1 - x1) + p2,    phi1 = x1 (1 - p1) + p3,

and the Hamiltonian (up to a control-independent term) is
``phi0 u0 + phi1 u1``.

:func:`verify_extremal` checks a control against the necessary conditions.
``p2, p3`` are not determined by the dynamics, so they are fitted: for a
constant state ``c`` the singular values ``-(1-c)^2, -c^2`` are tried, and in
general the maximum condition is solved for each of them separately, since
``p2`` only enters ``phi0`` and ``p3`` only ``phi1``. A sampled grid search
over ``[-1, 0]^2`` is available as an independent route (``method="grid"``).
"""

from __future__ import annotations

import enum
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .occupancy import OccupancyOrbit, periodic_orbit, propagate_piece
from .signals import PeriodicControl, channel_mean

__all__ = [
    "ArcType",
    "Arc",
    "Costate",
    "CostatePath",
    "SwitchingRecord",
    "Certificate",
    "costate_propagate_piece",
    "costate_periodic",
    "singular_costate",
    "switching_functions",
    "switching_derivatives",
    "hamiltonian",
    "hamiltonian_argmax",
    "classify_arcs",
    "multiplier_intervals",
    "grid_fit_multipliers",
    "verify_extremal",
]

DEFAULT_TOL = 1e-9
TRANSVERSALITY_TOL = 1e-12
SINGULAR_STATE_TOL = 1e-10


class ArcType(str, enum.Enum):
    RegularPP = "RegularPP"
    RegularMM = "RegularMM"
    RegularPM = "RegularPM"  # phi0 > 0, phi1 < 0
    RegularMP = "RegularMP"  # phi0 < 0, phi1 > 0
    Singular0 = "Singular0"
    Singular1 = "Singular1"
    SingularBoth = "SingularBoth"

    @property
    def singular(self) -> bool:
        return self.name.startswith("Singular")

    @property
    def mixed(self) -> bool:
        return self in (ArcType.RegularPM, ArcType.RegularMP)


_SIGN_TO_ARC = {
    (1, 1): ArcType.RegularPP,
    (-1, -1): ArcType.RegularMM,
    (1, -1): ArcType.RegularPM,
    (-1, 1): ArcType.RegularMP,
    (0, 0): ArcType.SingularBoth,
    (0, 1): ArcType.Singular0,
    (0, -1): ArcType.Singular0,
    (1, 0): ArcType.Singular1,
    (-1, 0): ArcType.Singular1,
}


@dataclass(frozen=True)
class Arc:
    start: float
    end: float
    kind: ArcType

    def to_dict(self):
        return {"start": self.start, "end": self.end, "type": self.kind.value}


@dataclass(frozen=True)
class Costate:
    p1_initial: float
    p2: float
    p3: float
    p0: float = float("nan")


@dataclass(frozen=True, eq=False)
class CostatePath:
    """Periodic ``p1`` at the control breakpoints."""

    control: PeriodicControl
    times: np.ndarray
    values: np.ndarray
    cost_weight: float = 1.0

    @property
    def p1_initial(self) -> float:
        return float(self.values[0])

    @property
    def transversality_residual(self) -> float:
        return float(abs(self.values[0] - self.values[-1]))

    def evaluate(self, t) -> np.ndarray:
        ctrl = self.control
        tt = np.mod(np.asarray(t, dtype=float), ctrl.period)
        idx = ctrl.piece_index(tt)
        return costate_propagate_piece(
            self.values[idx],
            ctrl.values0[idx],
            ctrl.values1[idx],
            tt - ctrl.breakpoints[idx],
            self.cost_weight,
        )


def costate_propagate_piece(p1, u0, u1, dt, cost_weight: float = 1.0):
    """Forward co-state solution ``p* + (p1 - p*) exp((u0+u1) dt)``."""
    k = np.add(u0, u1)
    ps = cost_weight * np.divide(u1, k)
    out = ps + np.subtract(p1, ps) * np.exp(k * np.asarray(dt, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def costate_periodic(ctrl: PeriodicControl, cost_weight: float = 1.0) -> CostatePath:
    """The unique co-state path with ``p1(0) = p1(T)``.

    The forward map expands by ``exp(int (u0+u1))``, so the fixed point is
    found on the (contracting) backward map and the path is filled from the
    end of the period towards its start.
    """
    dt = ctrl.durations
    k = ctrl.values0 + ctrl.values1
    ps = cost_weight * ctrl.values1 / k
    E = np.exp(-k * dt)
    one_minus_E = -np.expm1(-k * dt)
    # backward: p(t_i) = E_i p(t_{i+1}) + ps_i (1 - E_i)
    delta = 0.0
    for i in range(ctrl.n_pieces - 1, -1, -1):
        delta = delta * E[i] + ps[i] * one_minus_E[i]
    pT = delta / -np.expm1(-(k * dt).sum())
    values = np.empty(ctrl.n_pieces + 1)
    values[-1] = pT
    for i in range(ctrl.n_pieces - 1, -1, -1):
        values[i] = ps[i] + (values[i + 1] - ps[i]) * E[i]
    values.setflags(write=False)
    return CostatePath(ctrl, ctrl.breakpoints, values, cost_weight)


def singular_costate(c: float, period: float | None = None, mean1: float | None = None) -> Costate:
    """Co-state making both switching functions vanish along ``x1 = c``."""
    if not 0.0 < c < 1.0:
        raise ValueError(f"c must lie in (0, 1), got {c}")
    p0 = period / mean1 if period is not None and mean1 else float("nan")
    return Costate(p1_initial=1.0 - c, p2=-((1.0 - c) ** 2), p3=-(c**2), p0=p0)


def switching_functions(x1, p1, p2, p3):
    x1 = np.asarray(x1, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    phi0 = p1 * (1.0 - x1) + p2
    phi1 = x1 * (1.0 - p1) + p3
    if phi0.ndim == 0:
        return float(phi0), float(phi1)
    return phi0, phi1


def switching_derivatives(x1, p1, u0, u1):
    """Time derivatives of ``(phi0, phi1)`` inside a piece."""
    x1 = np.asarray(x1, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    return u1 * (p1 - (1.0 - x1)), u0 * (1.0 - x1 - p1)


def hamiltonian(u0, u1, x1, costate: Costate, p1=None):
    """``phi0 u0 + phi1 u1``; the control-free part of H is omitted."""
    p1 = costate.p1_initial if p1 is None else p1
    phi0, phi1 = switching_functions(x1, p1, costate.p2, costate.p3)
    return np.multiply(phi0, u0) + np.multiply(phi1, u1)


def hamiltonian_argmax(phi0: float, phi1: float, lower: float, upper: float, tol: float = 0.0):
    """Maximizer over the box; ``None`` for a channel whose switching value is zero."""

    def pick(phi):
        if phi > tol:
            return upper
        if phi < -tol:
            return lower
        return None

    return pick(phi0), pick(phi1)


@dataclass(frozen=True, eq=False)
class SwitchingRecord:
    times: np.ndarray
    x1: np.ndarray
    p1: np.ndarray
    phi0: np.ndarray
    phi1: np.ndarray
    arcs: list[Arc]
    tol: float

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(header)
        buf.write("t,x1,p1,phi0,phi1\n")
        for row in zip(self.times, self.x1, self.p1, self.phi0, self.phi1):
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def _sample_times(ctrl: PeriodicControl, resolution: float) -> np.ndarray:
    n = max(int(np.ceil(1.0 / resolution)), 1)
    grid = np.linspace(0.0, ctrl.period, n + 1)
    return np.unique(np.concatenate([grid, ctrl.breakpoints]))


def _sign(v, tol):
    return np.where(v > tol, 1, np.where(v < -tol, -1, 0))


def _arcs_from_samples(times, phi0, phi1, tol) -> list[Arc]:
    s0 = _sign(phi0, tol)
    s1 = _sign(phi1, tol)
    arcs: list[Arc] = []
    start = 0
    for i in range(1, len(times) + 1):
        if i == len(times) or s0[i] != s0[start] or s1[i] != s1[start]:
            kind = _SIGN_TO_ARC[(int(s0[start]), int(s1[start]))]
            arcs.append(Arc(float(times[start]), float(times[i - 1]), kind))
            start = i
    return arcs


def _record(ctrl, orbit, costate_path, p2, p3, tol, resolution) -> SwitchingRecord:
    t = _sample_times(ctrl, resolution)
    x = orbit.evaluate(t)
    p = costate_path.evaluate(t)
    # close the period exactly rather than re-evaluating at T mod T = 0
    x[-1] = orbit.states[-1]
    p[-1] = costate_path.values[-1]
    phi0, phi1 = switching_functions(x, p, p2, p3)
    return SwitchingRecord(t, x, p, phi0, phi1, _arcs_from_samples(t, phi0, phi1, tol), tol)


def classify_arcs(
    ctrl: PeriodicControl,
    orbit: OccupancyOrbit,
    costate: Costate | CostatePath,
    tol: float = DEFAULT_TOL,
    p2: float | None = None,
    p3: float | None = None,
    resolution: float = 1e-3,
) -> SwitchingRecord:
    """Split ``[0, T]`` into maximal arcs by the signs of ``(phi0, phi1)``.

    ``|phi| <= tol`` counts as zero. ``resolution`` is the sample spacing as
    a fraction of the period; breakpoints are always sampled.
    """
    if isinstance(costate, CostatePath):
        path = costate
        if p2 is None or p3 is None:
            raise ValueError("p2 and p3 are required with a co-state path")
    else:
        path = _constant_path(ctrl, costate.p1_initial)
        p2 = costate.p2 if p2 is None else p2
        p3 = costate.p3 if p3 is None else p3
    return _record(ctrl, orbit, path, p2, p3, tol, resolution)


def _constant_path(ctrl, p1):
    # only meaningful when p1 is an equilibrium of every piece
    periodic = costate_periodic(ctrl)
    if np.max(np.abs(periodic.values - p1)) <= SINGULAR_STATE_TOL:
        return periodic
    values = np.empty(ctrl.n_pieces + 1)
    values[0] = p1
    for i in range(ctrl.n_pieces):
        values[i + 1] = costate_propagate_piece(
            values[i], ctrl.values0[i], ctrl.values1[i], ctrl.durations[i]
        )
    values.setflags(write=False)
    return CostatePath(ctrl, ctrl.breakpoints, values)


def _piece_ranges(ctrl, orbit, path):
    """Exact min/max over each piece of ``p1 (1-x1)`` and ``x1 (1-p1)``.

    On a piece ``x = xs + a e^{-ks}``, ``p = ps + b e^{ks}``, so both
    products have the form ``C + P e^{ks} + Q e^{-ks}`` with at most one
    interior stationary point, at ``e^{2ks} = Q / P``.
    """
    u0, u1, dt = ctrl.values0, ctrl.values1, ctrl.durations
    k = u0 + u1
    xs = u0 / k
    ps = path.cost_weight * u1 / k
    a = orbit.states[:-1] - xs
    b = path.values[:-1] - ps
    coeffs = (
        (ps * (1 - xs) - a * b, b * (1 - xs), -ps * a),
        (xs * (1 - ps) - a * b, -xs * b, (1 - ps) * a),
    )
    out = []
    for C, P, Q in coeffs:
        def f(s):
            return C + P * np.exp(k * s) + Q * np.exp(-k * s)

        cand = [f(np.zeros_like(dt)), f(dt)]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(P != 0, Q / P, -1.0)
            s_star = np.where(ratio > 0, np.log(np.where(ratio > 0, ratio, 1.0)) / (2 * k), -1.0)
        inside = (s_star > 0) & (s_star < dt)
        cand.append(np.where(inside, f(np.where(inside, s_star, 0.0)), cand[0]))
        stack = np.vstack(cand)
        out.append((stack.min(axis=0), stack.max(axis=0)))
    return out


def _channel_levels(values, lower, upper):
    scale = 1e-12 * upper
    at_upper = np.abs(values - upper) <= scale
    at_lower = np.abs(values - lower) <= scale
    return at_upper, at_lower


def multiplier_intervals(ctrl, orbit, path, tol: float = DEFAULT_TOL):
    """Intervals of ``p2`` and ``p3`` allowed by the maximum condition.

    Each piece contributes one constraint per channel: a control at the
    upper bound needs ``phi >= -tol`` on the whole piece, one at the lower
    bound ``phi <= tol``, and an interior value ``|phi| <= tol``.
    Returns ``((lo2, hi2), (lo3, hi3))``; an interval with ``lo > hi`` is
    empty.
    """
    lo, hi = ctrl.bounds.lower, ctrl.bounds.upper
    result = []
    for ch, (gmin, gmax) in enumerate(_piece_ranges(ctrl, orbit, path)):
        at_upper, at_lower = _channel_levels(ctrl.values(ch), lo, hi)
        interior = ~(at_upper | at_lower)
        # phi = g + p: need p >= -gmin - tol where u is high or interior,
        # p <= -gmax + tol where u is low or interior
        need_lower = at_upper | interior
        need_upper = at_lower | interior
        lower_bound = np.max(np.where(need_lower, -gmin - tol, -np.inf))
        upper_bound = np.min(np.where(need_upper, -gmax + tol, np.inf))
        result.append((float(lower_bound), float(upper_bound)))
    return tuple(result)


def _sampled_violation(g, u, lower, upper, tol):
    """Per-candidate worst breach of the maximum condition on samples.

    ``g`` has shape ``(S,)``; returns a function of ``p`` (array) giving the
    largest amount by which ``phi = g + p`` has the wrong sign.
    """
    at_upper, at_lower = _channel_levels(u, lower, upper)
    interior = ~(at_upper | at_lower)
    g_hi = g[at_upper | interior]
    g_lo = g[at_lower | interior]

    def violation(p):
        p = np.atleast_1d(np.asarray(p, dtype=float))[:, None]
        v = np.zeros(p.shape[0])
        if g_hi.size:
            v = np.maximum(v, np.max(-(g_hi[None, :] + p) - tol, axis=1))
        if g_lo.size:
            v = np.maximum(v, np.max((g_lo[None, :] + p) - tol, axis=1))
        return np.maximum(v, 0.0)

    return violation


def grid_fit_multipliers(
    ctrl: PeriodicControl,
    tol: float = DEFAULT_TOL,
    resolution: float = 1e-3,
    sample_resolution: float = 1e-3,
):
    """Grid search of ``(p2, p3)`` over ``[-1, 0]^2`` with local refinement.

    Works only from sampled switching values (piece interiors, no closed-form
    extremes). Since the two multipliers decouple, each axis is scanned on
    its own and the best grid point is refined by ternary search. Returns ``(p2, p3, violation0, violation1)``; a zero
    violation means the sampled maximum condition holds.
    """
    orbit = periodic_orbit(ctrl)
    path = costate_periodic(ctrl)
    t = _sample_times(ctrl, sample_resolution)
    # interior points keep the control value unambiguous
    mids = 0.5 * (t[:-1] + t[1:])
    x = orbit.evaluate(mids)
    p = path.evaluate(mids)
    u0, u1 = ctrl.sample(mids)
    grid = np.linspace(-1.0, 0.0, int(round(1.0 / resolution)) + 1)
    out = []
    lo, hi = ctrl.bounds.lower, ctrl.bounds.upper
    for g, u in ((p * (1 - x), u0), (x * (1 - p), u1)):
        viol = _sampled_violation(g, u, lo, hi, tol)
        vals = viol(grid)
        j = int(np.argmin(vals))
        best_p, best_v = float(grid[j]), float(vals[j])
        if best_v > 0:
            # violation is convex and piecewise linear in p: ternary search
            a = float(grid[max(j - 1, 0)])
            b = float(grid[min(j + 1, grid.size - 1)])
            for _ in range(200):
                m1 = a + (b - a) / 3.0
                m2 = b - (b - a) / 3.0
                v1, v2 = viol([m1, m2])
                if v1 <= v2:
                    b = m2
                else:
                    a = m1
                if b - a < 1e-16:
                    break
            q = 0.5 * (a + b)
            vq = float(viol(q)[0])
            if vq < best_v:
                best_p, best_v = q, vq
        out.append((best_p, best_v))
    return out[0][0], out[1][0], out[0][1], out[1][1]


@dataclass
class Certificate:
    passed: bool
    violations: list[str]
    arcs: list[Arc]
    p1_initial: float
    p2: float
    p3: float
    p0: float
    transversality_residual: float
    max_abs_phi0: float
    max_abs_phi1: float
    x1_range: tuple[float, float]
    p1_range: tuple[float, float]
    tol: float
    method: str
    record: SwitchingRecord | None = field(default=None, repr=False)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "violations": list(self.violations),
            "arcs": [a.to_dict() for a in self.arcs],
            "p1_initial": self.p1_initial,
            "p2": self.p2,
            "p3": self.p3,
            "p0": self.p0,
            "transversality_residual": self.transversality_residual,
            "max_abs_phi0": self.max_abs_phi0,
            "max_abs_phi1": self.max_abs_phi1,
            "x1_range": list(self.x1_range),
            "p1_range": list(self.p1_range),
            "tol": self.tol,
            "method": self.method,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _check_candidate(ctrl, orbit, path, intervals, p2, p3, tol, resolution, trans_tol):
    lo, hi = ctrl.bounds.lower, ctrl.bounds.upper
    rec = _record(ctrl, orbit, path, p2, p3, tol, resolution)
    violations = []

    (lo2, hi2), (lo3, hi3) = intervals
    if not (lo2 <= p2 <= hi2):
        violations.append(f"maximum_condition: u0 inconsistent with sign of phi0 (p2 feasible in [{lo2:.6g}, {hi2:.6g}])")
    if not (lo3 <= p3 <= hi3):
        violations.append(f"maximum_condition: u1 inconsistent with sign of phi1 (p3 feasible in [{lo3:.6g}, {hi3:.6g}])")

    if path.transversality_residual > trans_tol:
        violations.append(f"transversality: |p1(0) - p1(T)| = {path.transversality_residual:.3g}")

    a, b = lo / (lo + hi), hi / (lo + hi)
    if not (np.all(rec.x1 > a) and np.all(rec.x1 < b)):
        violations.append(f"bounds: x1 leaves ({a:.6g}, {b:.6g})")
    if not (np.all(rec.p1 > a) and np.all(rec.p1 < b)):
        violations.append(f"bounds: p1 leaves ({a:.6g}, {b:.6g})")

    mixed = ((rec.phi0 > tol) & (rec.phi1 < -tol)) | ((rec.phi0 < -tol) & (rec.phi1 > tol))
    if np.any(mixed):
        violations.append(f"mixed_sign: phi0 * phi1 < 0 at t = {float(rec.times[np.argmax(mixed)]):.6g}")

    for arc in rec.arcs:
        if not arc.kind.singular or arc.end <= arc.start:
            continue
        sel = (rec.times >= arc.start) & (rec.times <= arc.end)
        xs = rec.x1[sel]
        if np.ptp(xs) > SINGULAR_STATE_TOL:
            violations.append(
                f"singular_arc: x1 not constant on [{arc.start:.6g}, {arc.end:.6g}] (spread {np.ptp(xs):.3g})"
            )
            continue
        c = float(np.mean(xs))
        mids = 0.5 * (rec.times[sel][:-1] + rec.times[sel][1:])
        u0, u1 = ctrl.sample(mids)
        if np.any(np.abs((1.0 / c - 1.0) * u0 - u1) > 1e-9 * hi):
            violations.append(f"inputs_coupled: (1/c - 1) u0 != u1 on [{arc.start:.6g}, {arc.end:.6g}]")

    # derivative signs are only compared strictly inside pieces
    mids = 0.5 * (rec.times[:-1] + rec.times[1:])
    u0, u1 = ctrl.sample(mids)
    d0, d1 = switching_derivatives(orbit.evaluate(mids), path.evaluate(mids), u0, u1)
    if np.any(d0 * d1 > tol * tol):
        violations.append("sign_opposition: dphi0/dt and dphi1/dt share a sign")
    return violations, rec


def _candidates(ctrl, orbit, intervals, tol, method):
    cands = []
    x = orbit.states
    if np.ptp(x) <= SINGULAR_STATE_TOL:
        c = float(x[0])
        sc = singular_costate(c)
        cands.append((sc.p2, sc.p3))
    if method == "grid":
        p2, p3, _, _ = grid_fit_multipliers(ctrl, tol)
        cands.append((p2, p3))
        return cands
    (lo2, hi2), (lo3, hi3) = intervals

    def picks(lo, hi):
        if lo <= hi:
            return [0.5 * (lo + hi), lo, hi]
        return [0.5 * (lo + hi)]

    for p2 in picks(lo2, hi2):
        for p3 in picks(lo3, hi3):
            cands.append((p2, p3))
    return cands


def verify_extremal(
    ctrl: PeriodicControl,
    tol: float = DEFAULT_TOL,
    method: str = "interval",
    resolution: float = 1e-3,
    transversality_tol: float = TRANSVERSALITY_TOL,
) -> Certificate:
    """Check the necessary optimality conditions for ``ctrl``.

    Builds the periodic orbit and co-state, fits ``(p2, p3)`` and checks the
    maximum condition (bang-bang on regular arcs, coupled inputs and constant
    state on singular arcs), transversality, the invariant band
    ``(l/(l+L), L/(l+L))`` for ``x1`` and ``p1``, absence of mixed-sign arcs,
    and opposite signs of the switching derivatives. Violations are listed,
    not raised. ``method`` is ``"interval"`` (exact) or ``"grid"``.
    """
    if method not in ("interval", "grid"):
        raise ValueError(f"unknown method {method!r}")
    orbit = periodic_orbit(ctrl)
    path = costate_periodic(ctrl)
    mean1 = channel_mean(ctrl, 1)
    p0 = ctrl.period / mean1

    intervals = multiplier_intervals(ctrl, orbit, path, tol)

    best = None
    for p2, p3 in _candidates(ctrl, orbit, intervals, tol, method):
        violations, rec = _check_candidate(
            ctrl, orbit, path, intervals, p2, p3, tol, resolution, transversality_tol
        )
        if best is None or len(violations) < len(best[0]):
            best = (violations, rec, p2, p3)
        if not violations:
            break
    violations, rec, p2, p3 = best
    return Certificate(
        passed=not violations,
        violations=violations,
        arcs=rec.arcs,
        p1_initial=path.p1_initial,
        p2=float(p2),
        p3=float(p3),
        p0=p0,
        transversality_residual=path.transversality_residual,
        max_abs_phi0=float(np.max(np.abs(rec.phi0))),
        max_abs_phi1=float(np.max(np.abs(rec.phi1))),
        x1_range=(float(rec.x1.min()), float(rec.x1.max())),
        p1_range=(float(rec.p1.min()), float(rec.p1.max())),
        tol=tol,
        method=method,
        record=rec,
        notes=[
            "co-state scaled by mean(u1): dynamics use unit cost weight, p0 reported as T/mean(u1)",
            f"zero band |phi| <= {tol:g}; sample spacing {resolution:g} T",
        ],
    )
