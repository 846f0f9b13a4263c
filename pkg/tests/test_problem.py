from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochscp.problem import (ConfigError, Obstacle, ObstacleSet, TimeGrid, build_car_benchmark,
                              config_to_dict, default_config, default_config_path, eval_drift,
                              eval_obstacle_potential, load_config, parse_config)

finite = st.floats(-5, 5, allow_nan=False)
CAR = build_car_benchmark()


def test_default_config_constants(car):
    cfg = default_config()
    assert cfg.horizon == 5.0 and cfg.N == 41
    assert cfg.alpha2 == 0.1 and cfg.beta2 == 0.01
    assert cfg.lam == 500 and cfg.clearance == 0.1
    assert list(cfg.goal) == [2.2, 3.0, 0.0, 0.0, 0.0]
    assert len(cfg.obstacles) == 4
    np.testing.assert_array_equal(car.goal_x, [2.2, 3.0, 0.0])
    np.testing.assert_array_equal(car.goal_z, [0.0, 0.0])
    assert car.horizon == 5.0


def test_shipped_config_parses_bit_for_bit():
    raw = json.loads(default_config_path().read_text())
    cfg = load_config(default_config_path())
    assert cfg.alpha2 == raw["alpha2"] and cfg.beta2 == raw["beta2"]
    assert cfg.lam == raw["lambda"]
    assert config_to_dict(cfg)["obstacles"] == raw["obstacles"]


def test_no_obstacles_gives_zero_penalty():
    inst = build_car_benchmark(dataclasses.replace(default_config(), obstacles=()))
    x = np.random.default_rng(0).normal(size=(50, 3))
    assert np.all(inst.state_penalty(0.0, x) == 0.0)


def test_zero_noise_config_has_zero_diffusion():
    inst = build_car_benchmark(dataclasses.replace(default_config(), alpha2=0.0, beta2=0.0))
    for z in np.random.default_rng(1).normal(size=(10, 2)):
        assert np.all(inst.diffusion(0.3, z) == 0.0)


def test_car_rejects_bad_radius_and_horizon():
    with pytest.raises(ValueError):
        build_car_benchmark(dataclasses.replace(default_config(), obstacles=(Obstacle(0, 0, 0.0),)))
    with pytest.raises(ValueError):
        build_car_benchmark(dataclasses.replace(default_config(), horizon=0.0))


def test_obstacle_potential_examples():
    obs = ObstacleSet((Obstacle(1.0, 2.0, 0.5),), clearance=0.1)
    assert eval_obstacle_potential(obs, [10.0, 10.0]) == 0.0
    assert eval_obstacle_potential(obs, [1.0, 2.0]) == pytest.approx(-0.36, abs=1e-15)
    assert eval_obstacle_potential(obs, [1.6, 2.0]) == 0.0


@given(st.floats(0, 2 * np.pi), st.floats(-1e-9, 1e-9))
def test_obstacle_potential_continuous_at_boundary(angle, offset):
    obs = ObstacleSet((Obstacle(0.3, -0.2, 0.4),), clearance=0.1)
    rad = 0.5 + offset
    r = np.array([0.3, -0.2]) + rad * np.array([np.cos(angle), np.sin(angle)])
    assert abs(eval_obstacle_potential(obs, r)) < 1e-8


def test_penalty_sign_variants():
    ob = (Obstacle(0.0, 0.0, 0.5),)
    printed = ObstacleSet(ob, clearance=0.1, weight=2.0, sign="as_printed")
    repulsive = dataclasses.replace(printed, sign="repulsive")
    x = np.array([0.1, 0.0, 0.0])
    assert printed.cost(x) == pytest.approx(2.0 * (0.01 - 0.36))
    assert repulsive.cost(x) == pytest.approx(-printed.cost(x))
    # repulsive gradient points away from the centre
    assert repulsive.cost_grad(x)[0] < 0.0


def test_eval_drift_examples(car):
    dx, dz = eval_drift(car, 0.0, [0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0])
    np.testing.assert_allclose(dx, [1.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_array_equal(dz, [0.0, 0.0])
    dx, dz = eval_drift(car, 0.0, [0.5, -0.5], [0.0, 0.0, np.pi / 2], [2.0, 1.0])
    np.testing.assert_allclose(dx, [0.0, 2.0, 1.0], atol=1e-15)
    np.testing.assert_array_equal(dz, [0.5, -0.5])


def test_eval_drift_dimension_mismatch(car):
    with pytest.raises(ValueError, match="dimension mismatch"):
        eval_drift(car, 0.0, [0.0], [0.0, 0.0, 0.0], [0.0, 0.0])


@settings(max_examples=50)
@given(st.lists(finite, min_size=9, max_size=9), st.floats(0, 1))
def test_drift_is_affine_in_control(v, a):
    car = CAR
    u1, u2, x, z = np.array(v[0:2]), np.array(v[2:4]), np.array(v[4:7]), np.array(v[7:9])
    mix = eval_drift(car, 0.1, a * u1 + (1 - a) * u2, x, z)
    f1 = eval_drift(car, 0.1, u1, x, z)
    f2 = eval_drift(car, 0.1, u2, x, z)
    for k in range(2):
        np.testing.assert_allclose(mix[k], a * f1[k] + (1 - a) * f2[k], atol=1e-12)


def test_time_grid():
    g = TimeGrid(41, 5.0)
    assert g.h == 0.125 and g.n_stages == 40
    assert g.times[0] == 0.0 and g.times[-1] == 5.0
    assert np.all(np.diff(g.times) > 0)
    with pytest.raises(ValueError):
        TimeGrid(1, 5.0)


def test_config_errors_are_line_anchored():
    text = '{\n  "alpha2": 0.1,\n  "horizon": -1\n}'
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == 3
    with pytest.raises(ConfigError) as err:
        parse_config('{\n  "alpha2": 0.1,\n  "bogus": 1\n}')
    assert err.value.line == 3 and "bogus" in str(err.value)
    with pytest.raises(ConfigError) as err:
        parse_config('{\n  "alpha2": 0.1,\n  oops\n}')
    assert err.value.line == 3


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
