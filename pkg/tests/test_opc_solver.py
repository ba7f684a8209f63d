import json

import numpy as np
import pytest

from entrainlab.occupancy import periodic_orbit
from entrainlab.opc_solver import (
    SolverConfig,
    analytic_optimum,
    bangbang_oracle,
    bangbang_values,
    fd_gradient,
    objective,
    projected_ascent,
    random_feasible,
    report_json,
    sample_objectives,
    tangent_gradient_norm,
)
from entrainlab.signals import MeanTargets, PeriodicControl, channel_mean, make_constant

SMALL = dict(n_pieces=8, max_iters=60, restarts=3, seed=5)


def assert_feasible(ctrl, bounds, means):
    for ch, m in enumerate(means):
        v = ctrl.values(ch)
        assert np.all(v >= bounds.lower - 1e-12) and np.all(v <= bounds.upper + 1e-12)
        assert abs(channel_mean(ctrl, ch) - m) <= 1e-12


def test_objective_examples(constant, bounds):
    assert objective(constant) == pytest.approx(1 / 3, abs=1e-15)
    assert objective(make_constant(10.0, bounds, MeanTargets(0.5, 0.5))) == pytest.approx(0.5, abs=1e-15)
    for seed in range(10):
        assert 0 < objective(random_feasible(seed, bounds, MeanTargets(0.3, 0.6), 10.0, 16)) < 1


def test_analytic_optimum():
    assert analytic_optimum(MeanTargets(0.3, 0.6)) == pytest.approx(1 / 3)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(n_pieces=0)
    with pytest.raises(ValueError):
        SolverConfig(step_size=0.0)


def test_random_feasible_deterministic(bounds, means):
    a = random_feasible(11, bounds, means, 10.0, 16)
    b = random_feasible(11, bounds, means, 10.0, 16)
    np.testing.assert_array_equal(a.values0, b.values0)
    np.testing.assert_array_equal(a.values1, b.values1)
    c = random_feasible(12, bounds, means, 10.0, 16)
    assert not np.array_equal(a.values0, c.values0)


def test_random_feasible_is_feasible(bounds, means):
    for seed in range(50):
        assert_feasible(random_feasible(seed, bounds, means, 10.0, 16), bounds, means)


def test_sample_objectives_below_optimum(bounds, means):
    vals = sample_objectives(bounds, means, 10.0, 16, 5000, seed=3, chunk=1000)
    assert vals.shape == (5000,)
    assert np.max(vals) <= 1 / 3 + 1e-9
    # chunking changes the streams but never the per-sample evaluation
    again = sample_objectives(bounds, means, 10.0, 16, 5000, seed=3, chunk=1000)
    np.testing.assert_array_equal(vals, again)
    assert sample_objectives(bounds, means, 10.0, 16, 0, seed=3).size == 0


def test_sample_objectives_match_scalar(bounds, means):
    from entrainlab.opc_solver import random_feasible_batch
    from entrainlab.signals import uniform_breakpoints

    vals = sample_objectives(bounds, means, 10.0, 4, 7, seed=9, chunk=7)
    v0, v1 = random_feasible_batch(np.random.default_rng([9, 0]), bounds, means, 4, 7)
    bp = uniform_breakpoints(10.0, 4)
    for i in range(7):
        ref = periodic_orbit(PeriodicControl(10.0, bp, v0[i], v1[i], bounds)).throughput_normalized
        assert vals[i] == pytest.approx(ref, rel=1e-14)


def test_gradient_vanishes_at_constant(bounds, means):
    ctrl = PeriodicControl(10.0, np.linspace(0, 10, 9), [0.3] * 8, [0.6] * 8, bounds)
    assert tangent_gradient_norm(ctrl) <= 1e-6


def test_fd_gradient_matches_difference(bounds, means):
    ctrl = random_feasible(4, bounds, means, 10.0, 4)
    g0, g1 = fd_gradient(ctrl)
    h = 1e-5
    v = ctrl.values0.copy()
    v[2] += h
    up = objective(PeriodicControl(10.0, ctrl.breakpoints, v, ctrl.values1, bounds))
    v[2] -= 2 * h
    down = objective(PeriodicControl(10.0, ctrl.breakpoints, v, ctrl.values1, bounds))
    assert g0[2] == pytest.approx((up - down) / (2 * h), rel=1e-5)


def test_gradient_nonzero_away_from_constant(bounds, means):
    assert tangent_gradient_norm(random_feasible(1, bounds, means, 10.0, 16)) > 1e-4


def test_single_piece_gives_constant(bounds, means):
    rep = projected_ascent(SolverConfig(n_pieces=1, restarts=2, max_iters=5), bounds, means, 10.0)
    assert rep.best_normalized == pytest.approx(1 / 3, abs=1e-15)
    np.testing.assert_allclose(rep.best_control.values0, [0.3], atol=1e-15)


def test_ascent_small_run(bounds, means):
    rep = projected_ascent(SolverConfig(**SMALL), bounds, means, 10.0)
    assert rep.best_normalized <= 1 / 3 + 1e-9
    assert rep.gain_of_entrainment <= 1e-9
    assert rep.constant_normalized == pytest.approx(1 / 3, abs=1e-12)
    assert len(rep.restart_values) == 3
    assert rep.best_restart == int(np.argmax(rep.restart_values))
    assert_feasible(rep.best_control, bounds, means)
    # every restart improves on its random start
    for r in range(3):
        rows = [t for t in rep.trace if t.restart == r]
        assert rows[-1].objective > rows[0].objective


def test_trace_is_monotone(bounds, means):
    rep = projected_ascent(SolverConfig(**SMALL), bounds, means, 10.0)
    for r in range(3):
        objs = [t.objective for t in rep.trace if t.restart == r and t.accepted]
        assert all(b >= a for a, b in zip(objs, objs[1:]))


def test_ascent_deterministic(bounds, means):
    a = projected_ascent(SolverConfig(**SMALL), bounds, means, 10.0)
    b = projected_ascent(SolverConfig(**SMALL), bounds, means, 10.0)
    assert a.to_dict() == b.to_dict()
    assert a.trace_csv() == b.trace_csv()


def test_ascent_symmetric_case(bounds):
    means = MeanTargets(0.5, 0.5)
    rep = projected_ascent(SolverConfig(**SMALL), bounds, means, 10.0)
    assert rep.best_normalized <= 0.5 + 1e-9


def test_zero_restarts_reports_constant(bounds, means):
    rep = projected_ascent(SolverConfig(restarts=0), bounds, means, 10.0)
    assert rep.best_restart is None and rep.trace == []
    assert rep.best_normalized == pytest.approx(1 / 3, abs=1e-15)


def test_report_json_keys(bounds, means):
    rep = projected_ascent(SolverConfig(n_pieces=4, restarts=1, max_iters=3), bounds, means, 10.0)
    d = json.loads(report_json(rep, {"trace_file": "trace.csv"}))
    assert {"best_normalized", "analytic_optimum", "gain_of_entrainment", "restarts", "trace_file"} <= set(d)
    lines = rep.trace_csv().splitlines()
    assert lines[0] == "restart,iteration,objective,step_norm,accepted"


def test_bangbang_grid_of_one_matches_manual(bounds, means):
    # duty cycles 0.25 and 0.625, both switching on at t = 0
    ctrl = PeriodicControl(10.0, [0.0, 2.5, 6.25, 10.0], [0.9, 0.1, 0.1], [0.9, 0.9, 0.1], bounds)
    assert bangbang_oracle(bounds, means, 10.0, 1) == pytest.approx(objective(ctrl), abs=1e-14)


def test_bangbang_grid_entries_match_manual(bounds, means):
    vals = bangbang_values(bounds, means, 10.0, 4)
    # phase indices (1, 2): u0 high on [2.5, 5), u1 high on [5, 11.25) mod 10
    ctrl = PeriodicControl(
        10.0, [0.0, 1.25, 2.5, 5.0, 10.0], [0.1, 0.1, 0.9, 0.1], [0.9, 0.1, 0.1, 0.9], bounds
    )
    assert vals[1, 2] == pytest.approx(objective(ctrl), abs=1e-14)


def test_bangbang_in_phase_equal_means(bounds):
    means = MeanTargets(0.5, 0.5)
    vals = bangbang_values(bounds, means, 10.0, 10)
    ctrl = PeriodicControl(10.0, [0.0, 5.0, 10.0], [0.9, 0.1], [0.9, 0.1], bounds)
    orbit = periodic_orbit(ctrl)
    assert vals[0, 0] == pytest.approx(orbit.throughput_normalized, abs=1e-14)
    assert vals[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_bangbang_oracle_below_optimum(bounds, means):
    assert bangbang_oracle(bounds, means, 10.0, 30) <= 1 / 3 + 1e-9


def test_bangbang_rejects_boundary_duty(bounds):
    with pytest.raises(ValueError):
        bangbang_values(bounds, MeanTargets(0.9, 0.5), 10.0, 3)


def test_thread_count_does_not_change_results(bounds, means, monkeypatch):
    one = sample_objectives(bounds, means, 10.0, 8, 900, seed=1, chunk=200)
    monkeypatch.setenv("ENTRAINLAB_THREADS", "3")
    three = sample_objectives(bounds, means, 10.0, 8, 900, seed=1, chunk=200)
    np.testing.assert_array_equal(one, three)
    monkeypatch.setenv("ENTRAINLAB_THREADS", "many")
    with pytest.raises(ValueError):
        sample_objectives(bounds, means, 10.0, 8, 900, seed=1, chunk=200)
