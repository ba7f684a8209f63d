"""Periodic piecewise-constant two-channel controls.

A control is stored by its absolute breakpoints ``0 = t_0 < ... < t_N = T``
and one rate per piece and channel. Everything here is immutable; the
helpers that build controls always return fresh objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ControlError",
    "ControlBounds",
    "MeanTargets",
    "PeriodicControl",
    "channel_mean",
    "project_to_feasible",
    "project_rows",
    "make_constant",
    "proportional_companion",
    "uniform_breakpoints",
]

# early-return threshold that keeps the projection exactly idempotent
_FEASIBLE_RTOL = 1e-14
_DUAL_TOL = 1e-14


class ControlError(ValueError):
    """Raised for malformed or infeasible controls."""


@dataclass(frozen=True)
class ControlBounds:
    lower: float
    upper: float

    def __post_init__(self):
        if not (0.0 < self.lower < self.upper):
            raise ControlError(
                f"bounds must satisfy 0 < lower < upper, got [{self.lower}, {self.upper}]"
            )

    def contains(self, values, atol: float = 0.0) -> bool:
        v = np.asarray(values, dtype=float)
        return bool(np.all(v >= self.lower - atol) and np.all(v <= self.upper + atol))


@dataclass(frozen=True)
class MeanTargets:
    mean0: float
    mean1: float

    def check_interior(self, bounds: ControlBounds) -> None:
        for name, m in (("mean0", self.mean0), ("mean1", self.mean1)):
            if not (bounds.lower < m < bounds.upper):
                raise ControlError(
                    f"{name}={m} must lie strictly inside ({bounds.lower}, {bounds.upper})"
                )

    def __iter__(self):
        return iter((self.mean0, self.mean1))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PeriodicControl:
    """T-periodic piecewise-constant pair ``(u0, u1)``.

    ``values0[i]`` and ``values1[i]`` hold on ``[breakpoints[i], breakpoints[i+1])``.
    """

    period: float
    breakpoints: np.ndarray
    values0: np.ndarray
    values1: np.ndarray
    bounds: ControlBounds

    def __post_init__(self):
        bp = _frozen(self.breakpoints)
        v0 = _frozen(self.values0)
        v1 = _frozen(self.values1)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values0", v0)
        object.__setattr__(self, "values1", v1)
        T = float(self.period)
        object.__setattr__(self, "period", T)
        if not T > 0:
            raise ControlError(f"period must be positive, got {T}")
        if bp.ndim != 1 or bp.size < 2:
            raise ControlError("need at least two breakpoints")
        if bp[0] != 0.0 or bp[-1] != T:
            raise ControlError("breakpoints must start at 0 and end at the period")
        if np.any(np.diff(bp) <= 0):
            raise ControlError("breakpoints must be strictly increasing")
        n = bp.size - 1
        if v0.shape != (n,) or v1.shape != (n,):
            raise ControlError(f"expected {n} values per channel")
        if not (self.bounds.contains(v0) and self.bounds.contains(v1)):
            raise ControlError(
                f"control values leave [{self.bounds.lower}, {self.bounds.upper}]"
            )

    @property
    def n_pieces(self) -> int:
        return self.values0.size

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    def values(self, channel: int) -> np.ndarray:
        if channel == 0:
            return self.values0
        if channel == 1:
            return self.values1
        raise ValueError(f"channel must be 0 or 1, got {channel}")

    def piece_index(self, t) -> np.ndarray:
        """Index of the piece containing ``t mod T``."""
        tt = np.mod(np.asarray(t, dtype=float), self.period)
        idx = np.searchsorted(self.breakpoints, tt, side="right") - 1
        return np.clip(idx, 0, self.n_pieces - 1)

    def sample(self, t):
        idx = self.piece_index(t)
        return self.values0[idx], self.values1[idx]

    def to_dict(self) -> dict:
        return {
            "period": self.period,
            "breakpoints": self.breakpoints.tolist(),
            "values0": self.values0.tolist(),
            "values1": self.values1.tolist(),
            "lower": self.bounds.lower,
            "upper": self.bounds.upper,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PeriodicControl":
        try:
            return cls(
                period=d["period"],
                breakpoints=d["breakpoints"],
                values0=d["values0"],
                values1=d["values1"],
                bounds=ControlBounds(float(d["lower"]), float(d["upper"])),
            )
        except KeyError as exc:
            raise ControlError(f"missing field {exc.args[0]!r}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PeriodicControl":
        return cls.from_dict(json.loads(text))


def uniform_breakpoints(T: float, n_pieces: int) -> np.ndarray:
    bp = np.linspace(0.0, T, n_pieces + 1)
    bp[-1] = T
    return bp


def channel_mean(ctrl: PeriodicControl, channel: int) -> float:
    """Time average of one channel, summed exactly piece by piece."""
    v = ctrl.values(channel)
    return float(np.dot(v, ctrl.durations) / ctrl.period)


def project_rows(values, lengths, lower: float, upper: float, target) -> np.ndarray:
    """Vectorized length-weighted projection onto box and mean constraint.

    ``values`` has shape ``(..., N)``; ``lengths`` broadcasts against it and
    ``target`` against ``values[..., 0]``. Solves

        min sum_i l_i (v_i - x_i)^2  s.t.  lower <= v_i <= upper,
                                            sum_i l_i v_i / sum_i l_i = target

    whose KKT solution is ``v_i = clip(x_i - lam)``. ``lam`` is found by
    bisection on the monotone dual residual, then recomputed exactly on the
    free set so the mean constraint holds to rounding.
    """
    x = np.asarray(values, dtype=float)
    l = np.broadcast_to(np.asarray(lengths, dtype=float), x.shape)
    m = np.broadcast_to(np.asarray(target, dtype=float), x.shape[:-1])
    if np.any(m <= lower) or np.any(m >= upper):
        raise ControlError(f"target mean must lie strictly inside ({lower}, {upper})")
    if np.any(l <= 0):
        raise ControlError("piece lengths must be positive")
    total = l.sum(axis=-1)

    def mean_of(v):
        return (v * l).sum(axis=-1) / total

    # lam in [min(x) - upper, max(x) - lower] brackets the root
    lo = x.min(axis=-1) - upper
    hi = x.max(axis=-1) - lower
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r = mean_of(np.clip(x - mid[..., None], lower, upper)) - m
        # residual is non-increasing in lam
        lo = np.where(r > 0, mid, lo)
        hi = np.where(r > 0, hi, mid)
        if np.all(hi - lo <= _DUAL_TOL * np.maximum(1.0, np.abs(mid))):
            break
    lam = 0.5 * (lo + hi)
    v = np.clip(x - lam[..., None], lower, upper)

    # exact multiplier on the free set
    free = (x - lam[..., None] > lower) & (x - lam[..., None] < upper)
    clipped_mass = np.where(free, 0.0, v * l).sum(axis=-1)
    free_len = np.where(free, l, 0.0).sum(axis=-1)
    free_mass = np.where(free, x * l, 0.0).sum(axis=-1)
    has_free = free_len > 0
    safe_len = np.where(has_free, free_len, 1.0)
    lam_exact = np.where(has_free, (free_mass - (m * total - clipped_mass)) / safe_len, lam)
    v_exact = np.where(free, x - lam_exact[..., None], v)
    ok = np.all((v_exact >= lower) & (v_exact <= upper), axis=-1)
    v = np.where(ok[..., None], v_exact, v)

    already = np.all((x >= lower) & (x <= upper), axis=-1) & (
        np.abs(mean_of(x) - m) <= _FEASIBLE_RTOL * np.abs(m)
    )
    return np.where(already[..., None], x, v)


def project_to_feasible(
    values: Sequence[float],
    piece_lengths: Sequence[float],
    bounds: ControlBounds,
    target_mean: float,
) -> np.ndarray:
    """Project ``values`` onto the box with the given length-weighted mean."""
    if not (bounds.lower < target_mean < bounds.upper):
        raise ControlError(
            f"target mean {target_mean} must lie strictly inside "
            f"({bounds.lower}, {bounds.upper})"
        )
    x = np.asarray(values, dtype=float)
    if x.ndim != 1:
        raise ControlError("values must be one-dimensional")
    return project_rows(x, piece_lengths, bounds.lower, bounds.upper, target_mean)


def make_constant(T: float, bounds: ControlBounds, means: MeanTargets) -> PeriodicControl:
    means.check_interior(bounds)
    return PeriodicControl(T, [0.0, T], [means.mean0], [means.mean1], bounds)


def proportional_companion(ctrl: PeriodicControl, means: MeanTargets) -> PeriodicControl:
    """Replace channel 1 by ``(mean1 / mean0) * u0``.

    Channel 1 then has mean ``mean1`` whenever channel 0 has mean ``mean0``.
    Raises ``ControlError`` if a scaled value leaves the box.
    """
    ratio = means.mean1 / means.mean0
    v1 = ratio * ctrl.values0
    if not ctrl.bounds.contains(v1):
        bad = v1[(v1 < ctrl.bounds.lower) | (v1 > ctrl.bounds.upper)]
        raise ControlError(
            f"companion channel leaves [{ctrl.bounds.lower}, {ctrl.bounds.upper}]: {bad.tolist()}"
        )
    return PeriodicControl(ctrl.period, ctrl.breakpoints, ctrl.values0, v1, ctrl.bounds)
