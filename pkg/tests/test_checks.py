from __future__ import annotations

import dataclasses

import numpy as np

from stochscp.checks import (format_table, jacobian_audit, moment_audit, probe_controls,
                             random_points, reference_rollout, run_checks, subproblem_audit)
from stochscp.problem import build_car_benchmark, default_config

from .conftest import lq_instance


def test_random_points_are_seeded_and_in_box(car):
    a = random_points(car, 10, seed=3)
    b = random_points(car, 10, seed=3)
    for pa, pb in zip(a, b):
        assert pa[0] == pb[0]
        np.testing.assert_array_equal(pa[1], pb[1])
        assert np.all(pa[1] >= car.u_lo) and np.all(pa[1] <= car.u_hi)


def test_jacobian_audit_on_car(car):
    res = jacobian_audit(car, n_points=100, seed=0)
    assert res.passed and res.value < 1e-6


def test_jacobian_audit_catches_corruption(car):
    def bad(t, u, x, z):
        jx, jz, ju = car.drift_x_jac(t, u, x, z)
        return jx, jz * 1.05, ju

    res = jacobian_audit(dataclasses.replace(car, drift_x_jac=bad), n_points=5)
    assert not res.passed


def test_probe_controls_stay_inside_box(car, car_grid):
    u = probe_controls(car, car_grid)
    assert u.shape == (car_grid.n_stages, car.m)
    assert np.all(u >= car.u_lo) and np.all(u <= car.u_hi)
    ref = reference_rollout(car, u, car_grid)
    np.testing.assert_array_equal(ref.mu[0], car.x0)
    assert np.all(np.isfinite(ref.mu))


def test_moment_audit_car(car, car_grid):
    res = moment_audit(car, car_grid, M=20000, seed=0)
    assert res.passed, res


def test_moment_audit_zero_noise():
    quiet = build_car_benchmark(dataclasses.replace(default_config(), alpha2=0.0, beta2=0.0))
    res = moment_audit(quiet, quiet.grid(41), M=50, seed=0)
    assert res.passed and res.value < 1e-3


def test_subproblem_audit_and_table(car, car_grid):
    res = subproblem_audit(car, car_grid)
    assert res.passed and res.detail == "all blocks convex"
    table = format_table([res])
    assert "convexity" in table and "PASS" in table


def test_run_checks_linear_instance():
    inst = lq_instance()
    results = run_checks(inst, inst.grid(21), paths=5000, jac_points=20)
    assert [r.name for r in results] == ["jacobians", "moments", "convexity"]
    assert all(r.passed for r in results)
