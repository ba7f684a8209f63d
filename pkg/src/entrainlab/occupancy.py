"""Exact simulation of the occupancy model ``x' = u0 (1 - x) - u1 x``.

With constant rates on a piece the solution relaxes exponentially to
``x* = u0 / (u0 + u1)`` at rate ``u0 + u1``, so every quantity here is
computed in closed form: piece propagation, the (affine) period map, its
fixed point, and the time average of ``u1 x``.

The array functions (``*_batch``) accept rates with shape ``(..., N)`` so a
whole population of controls can be evaluated at once.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .signals import PeriodicControl, channel_mean

__all__ = [
    "OccupancyOrbit",
    "ContractionReport",
    "propagate_piece",
    "period_map",
    "poincare_map_coefficients",
    "periodic_orbit",
    "periodic_orbit_batch",
    "average_throughput",
    "throughput_batch",
    "contraction_check",
    "trajectory_table",
    "trajectory_csv",
]


def propagate_piece(x0, u0, u1, dt):
    """State after ``dt`` time units of constant rates ``(u0, u1)``."""
    k = np.add(u0, u1)
    xs = np.divide(u0, k)
    out = xs + (np.subtract(x0, xs)) * np.exp(-k * np.asarray(dt, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def period_map(durations, u0, u1):
    """Coefficients ``(alpha, beta)`` with ``x(T) = alpha x(0) + beta``.

    Works along the last axis; ``durations`` broadcasts against the rates.
    """
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    dt = np.broadcast_to(np.asarray(durations, dtype=float), np.broadcast_shapes(u0.shape, u1.shape))
    k = u0 + u1
    xs = u0 / k
    E = np.exp(-k * dt)
    one_minus_E = -np.expm1(-k * dt)
    beta = np.zeros(dt.shape[:-1])
    for i in range(dt.shape[-1]):
        beta = beta * E[..., i] + xs[..., i] * one_minus_E[..., i]
    alpha = np.exp(-(k * dt).sum(axis=-1))
    return alpha, beta


def _fixed_point(durations, u0, u1):
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    dt = np.broadcast_to(np.asarray(durations, dtype=float), np.broadcast_shapes(u0.shape, u1.shape))
    _, beta = period_map(dt, u0, u1)
    one_minus_alpha = -np.expm1(-((u0 + u1) * dt).sum(axis=-1))
    return beta / one_minus_alpha


def _path(x0, durations, u0, u1):
    """States at all breakpoints, shape ``(..., N + 1)``."""
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    dt = np.broadcast_to(np.asarray(durations, dtype=float), np.broadcast_shapes(u0.shape, u1.shape))
    k = u0 + u1
    xs = u0 / k
    E = np.exp(-k * dt)
    n = dt.shape[-1]
    path = np.empty(dt.shape[:-1] + (n + 1,))
    path[..., 0] = x0
    for i in range(n):
        path[..., i + 1] = xs[..., i] + (path[..., i] - xs[..., i]) * E[..., i]
    return path


def _integral_u1x(path, durations, u0, u1):
    """Exact ``int u1 x dt`` per piece."""
    u0 = np.asarray(u0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    dt = np.asarray(durations, dtype=float)
    k = u0 + u1
    xs = u0 / k
    decay = -np.expm1(-k * dt) / k
    return u1 * (xs * dt + (path[..., :-1] - xs) * decay)


def periodic_orbit_batch(durations, u0, u1):
    """Periodic initial state and raw throughput for a batch of controls.

    Returns ``(x0, raw)`` with the leading (batch) shape of the rates.
    """
    dt = np.asarray(durations, dtype=float)
    x0 = _fixed_point(dt, u0, u1)
    path = _path(x0, dt, u0, u1)
    T = dt.sum(axis=-1)
    raw = _integral_u1x(path, dt, u0, u1).sum(axis=-1) / T
    return x0, raw


def throughput_batch(durations, u0, u1):
    """Normalized throughput ``mean(u1 x) / mean(u1)`` for a batch."""
    dt = np.asarray(durations, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    _, raw = periodic_orbit_batch(dt, u0, u1)
    mean1 = (u1 * dt).sum(axis=-1) / dt.sum(axis=-1)
    return raw / mean1


@dataclass(frozen=True, eq=False)
class OccupancyOrbit:
    """Periodic steady state of the occupancy model under one control."""

    initial: float
    control: PeriodicControl
    times: np.ndarray
    states: np.ndarray
    throughput_raw: float
    throughput_normalized: float
    piece_integrals: np.ndarray = field(repr=False)

    @property
    def periodicity_residual(self) -> float:
        return float(abs(self.states[-1] - self.states[0]))

    def evaluate(self, t) -> np.ndarray:
        """``x(t)`` at arbitrary times (periodically extended)."""
        ctrl = self.control
        tt = np.mod(np.asarray(t, dtype=float), ctrl.period)
        idx = ctrl.piece_index(tt)
        u0 = ctrl.values0[idx]
        u1 = ctrl.values1[idx]
        return propagate_piece(self.states[idx], u0, u1, tt - ctrl.breakpoints[idx])


def periodic_orbit(ctrl: PeriodicControl) -> OccupancyOrbit:
    """The unique periodic solution, from the fixed point of the period map."""
    dt = ctrl.durations
    u0, u1 = ctrl.values0, ctrl.values1
    x0 = float(_fixed_point(dt, u0, u1))
    path = _path(x0, dt, u0, u1)
    integrals = _integral_u1x(path, dt, u0, u1)
    raw = float(integrals.sum() / ctrl.period)
    path.setflags(write=False)
    integrals.setflags(write=False)
    return OccupancyOrbit(
        initial=x0,
        control=ctrl,
        times=ctrl.breakpoints,
        states=path,
        throughput_raw=raw,
        throughput_normalized=raw / channel_mean(ctrl, 1),
        piece_integrals=integrals,
    )


def poincare_map_coefficients(ctrl: PeriodicControl) -> tuple[float, float]:
    alpha, beta = period_map(ctrl.durations, ctrl.values0, ctrl.values1)
    return float(alpha), float(beta)


def average_throughput(orbit: OccupancyOrbit) -> tuple[float, float]:
    """``(raw, normalized)``; normalized divides by the mean of ``u1``.

    The raw value is ``(1/T) int u1 x dt``. At a constant control it equals
    ``u0 u1 / (u0 + u1)``; the normalized one equals ``u0 / (u0 + u1)``.
    """
    return orbit.throughput_raw, orbit.throughput_normalized


@dataclass(frozen=True)
class ContractionReport:
    alpha: float
    differences: tuple[float, ...]
    predicted: tuple[float, ...]
    max_abs_error: float
    max_rel_error: float

    @property
    def strictly_decreasing(self) -> bool:
        d = np.asarray(self.differences)
        return bool(np.all(np.diff(d) < 0)) if np.any(d > 0) else True


def contraction_check(ctrl: PeriodicControl, xa: float, xb: float, n_periods: int) -> ContractionReport:
    """Track two solutions for ``n_periods`` periods by piecewise propagation.

    The gap after ``k`` periods must equal ``alpha**k`` times the initial gap.
    """
    alpha, _ = poincare_map_coefficients(ctrl)
    dt = ctrl.durations
    a, b = float(xa), float(xb)
    gap0 = abs(a - b)
    diffs, preds = [], []
    for k in range(1, n_periods + 1):
        a = _path(a, dt, ctrl.values0, ctrl.values1)[-1]
        b = _path(b, dt, ctrl.values0, ctrl.values1)[-1]
        diffs.append(float(abs(a - b)))
        preds.append(alpha**k * gap0)
    d = np.asarray(diffs)
    p = np.asarray(preds)
    abs_err = float(np.max(np.abs(d - p))) if n_periods else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(p > 0, np.abs(d - p) / p, np.abs(d - p))
    rel_err = float(np.max(rel)) if n_periods else 0.0
    return ContractionReport(alpha, tuple(diffs), tuple(preds), abs_err, rel_err)


def trajectory_table(orbit: OccupancyOrbit, points_per_period: int = 1000):
    """Columns ``t, x1, u0, u1`` on a uniform grid over one period."""
    ctrl = orbit.control
    t = np.linspace(0.0, ctrl.period, points_per_period, endpoint=False)
    u0, u1 = ctrl.sample(t)
    return t, orbit.evaluate(t), u0, u1


def trajectory_csv(orbit: OccupancyOrbit, points_per_period: int = 1000, header: str = "") -> str:
    t, x, u0, u1 = trajectory_table(orbit, points_per_period)
    buf = io.StringIO()
    if header:
        buf.write(header)
    buf.write("t,x1,u0,u1\n")
    for row in zip(t, x, u0, u1):
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()
