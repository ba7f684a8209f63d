import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from entrainlab.occupancy import (
    average_throughput,
    contraction_check,
    period_map,
    periodic_orbit,
    periodic_orbit_batch,
    poincare_map_coefficients,
    propagate_piece,
    trajectory_csv,
    trajectory_table,
)
from entrainlab.opc_solver import random_feasible
from entrainlab.signals import ControlBounds, MeanTargets, PeriodicControl, make_constant, proportional_companion
from oracles import rk4

# RK4 (h = 1e-3) iterated over 200 periods from x = 0.5
SQUARE_ORBIT_X0 = 0.4533099685779438
# RK4 (h = 1e-4) on one piece
PIECE_RK4 = 0.3943035529371536


def test_propagate_equilibria():
    assert propagate_piece(0.5, 0.9, 0.9, 3.0) == 0.5
    assert propagate_piece(1 / 3, 0.3, 0.6, 7.0) == pytest.approx(1 / 3, abs=1e-16)


def test_propagate_against_rk4():
    got = propagate_piece(0.9, 0.1, 0.9, 1.0)
    assert got == pytest.approx(0.1 + 0.8 * np.exp(-1.0), abs=1e-15)
    assert abs(got - PIECE_RK4) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(
    x0=st.floats(0.01, 0.99),
    u0=st.floats(0.1, 0.9),
    u1=st.floats(0.1, 0.9),
    d1=st.floats(0.0, 5.0),
    d2=st.floats(0.0, 5.0),
)
def test_propagate_semigroup(x0, u0, u1, d1, d2):
    two = propagate_piece(propagate_piece(x0, u0, u1, d1), u0, u1, d2)
    one = propagate_piece(x0, u0, u1, d1 + d2)
    assert abs(two - one) <= 1e-14


def test_propagate_random_pieces_rk4(rng):
    n = 200
    x0 = rng.uniform(0.01, 0.99, n)
    u0 = rng.uniform(0.1, 0.9, n)
    u1 = rng.uniform(0.1, 0.9, n)
    dt = rng.uniform(0.0, 1.0, n)
    exact = propagate_piece(x0, u0, u1, dt)
    ref = rk4(lambda x: u0 * (1 - x) - u1 * x, x0, dt, 1e-4)
    assert np.max(np.abs(exact - ref)) <= 1e-9


def test_poincare_constant(constant):
    alpha, beta = poincare_map_coefficients(constant)
    assert alpha == pytest.approx(np.exp(-9.0), rel=1e-14)
    assert beta == pytest.approx((1 - np.exp(-9.0)) / 3, rel=1e-14)
    # affine map reproduces direct propagation
    for x in (0.1, 0.5, 0.8):
        assert alpha * x + beta == pytest.approx(propagate_piece(x, 0.3, 0.6, 10.0), abs=1e-15)


def test_period_map_zero_length_is_identity():
    alpha, beta = period_map([0.0, 0.0], [0.3, 0.5], [0.6, 0.2])
    assert (alpha, beta) == (1.0, 0.0)


def test_alpha_below_one(rng, bounds, means):
    for seed in range(20):
        ctrl = random_feasible(seed, bounds, means, 10.0, 16)
        alpha, beta = poincare_map_coefficients(ctrl)
        assert 0 < alpha < 1 and 0 < beta < 1


def test_period_map_is_affine(square):
    # three starting points, their images are collinear
    xs = np.array([0.1, 0.45, 0.9])
    from entrainlab.occupancy import _path

    ys = np.array([_path(x, square.durations, square.values0, square.values1)[-1] for x in xs])
    slope1 = (ys[1] - ys[0]) / (xs[1] - xs[0])
    slope2 = (ys[2] - ys[1]) / (xs[2] - xs[1])
    assert abs(slope1 - slope2) <= 1e-12


def test_orbit_constant(constant):
    orbit = periodic_orbit(constant)
    assert orbit.initial == pytest.approx(1 / 3, abs=1e-15)
    raw, norm = average_throughput(orbit)
    assert raw == pytest.approx(0.2, abs=1e-15)
    assert norm == pytest.approx(1 / 3, abs=1e-15)


def test_orbit_symmetric(bounds):
    orbit = periodic_orbit(make_constant(4.0, bounds, MeanTargets(0.5, 0.5)))
    assert orbit.initial == pytest.approx(0.5, abs=1e-15)
    assert average_throughput(orbit) == pytest.approx((0.25, 0.5), abs=1e-15)


def test_orbit_square_wave(square):
    orbit = periodic_orbit(square)
    assert abs(orbit.initial - SQUARE_ORBIT_X0) <= 1e-10
    assert orbit.periodicity_residual <= 1e-12


def test_throughput_against_quadrature(square):
    orbit = periodic_orbit(square)
    total = 0.0
    for a, b, u1 in zip(square.breakpoints[:-1], square.breakpoints[1:], square.values1):
        total += quad(lambda t: u1 * orbit.evaluate(t), a, b, epsabs=1e-13, epsrel=1e-13)[0]
    assert orbit.throughput_raw == pytest.approx(total / square.period, abs=1e-12)
    assert orbit.throughput_normalized == pytest.approx(orbit.throughput_raw / 0.6, rel=1e-14)


def test_throughput_in_range(bounds, means):
    for seed in range(30):
        orbit = periodic_orbit(random_feasible(seed, bounds, means, 10.0, 16))
        assert 0 < orbit.throughput_raw < bounds.upper
        assert 0 < orbit.throughput_normalized < 1


def test_batch_matches_scalar(bounds, means):
    ctrls = [random_feasible(s, bounds, means, 10.0, 8) for s in range(10)]
    dt = ctrls[0].durations
    x0, raw = periodic_orbit_batch(dt, np.array([c.values0 for c in ctrls]), np.array([c.values1 for c in ctrls]))
    for c, a, r in zip(ctrls, x0, raw):
        o = periodic_orbit(c)
        assert a == o.initial and r == o.throughput_raw


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), x0=st.floats(1e-6, 1 - 1e-6))
def test_forward_invariance(seed, x0):
    bounds = ControlBounds(0.1, 0.9)
    ctrl = random_feasible(seed, bounds, MeanTargets(0.3, 0.6), 10.0, 16)
    from entrainlab.occupancy import _path

    path = _path(x0, ctrl.durations, ctrl.values0, ctrl.values1)
    assert np.all(path > 0) and np.all(path < 1)
    orbit = periodic_orbit(ctrl)
    t, x, _, _ = trajectory_table(orbit, 500)
    assert np.all(x > 0) and np.all(x < 1)


def test_nonuniqueness_companion(bounds, means, rng):
    for seed in range(20):
        base = random_feasible(seed, bounds, MeanTargets(0.3, 0.3), 10.0, 16)
        # shrink channel 0 into [0.1, 0.45] so the doubled channel stays in the box
        v0 = 0.3 + (base.values0 - 0.3) * 0.15 / 0.6
        ctrl = PeriodicControl(10.0, base.breakpoints, v0, base.values1, bounds)
        comp = proportional_companion(ctrl, means)
        orbit = periodic_orbit(comp)
        assert np.max(np.abs(orbit.states - 1 / 3)) <= 1e-10
        assert abs(orbit.throughput_normalized - 1 / 3) <= 1e-10


def test_contraction_identical_starts(square):
    rep = contraction_check(square, 0.4, 0.4, 5)
    assert rep.differences == (0.0,) * 5


def test_contraction_constant(constant):
    rep = contraction_check(constant, 0.1, 0.9, 1)
    assert rep.differences[0] == pytest.approx(0.8 * np.exp(-9.0), rel=1e-12)


def test_contraction_decreasing(bounds, means):
    for seed in range(10):
        ctrl = random_feasible(seed, bounds, means, 2.0, 16)
        rep = contraction_check(ctrl, 0.05, 0.95, 6)
        assert rep.strictly_decreasing
        assert rep.max_abs_error <= 1e-12


def test_trajectory_csv(constant):
    orbit = periodic_orbit(constant)
    text = trajectory_csv(orbit, 10, header="# h\n")
    lines = text.strip().splitlines()
    assert lines[0] == "# h" and lines[1] == "t,x1,u0,u1"
    assert len(lines) == 12
    t, x1, u0, u1 = map(float, lines[2].split(","))
    assert (t, u0, u1) == (0.0, 0.3, 0.6)
    assert x1 == pytest.approx(1 / 3)
