from __future__ import annotations

import numpy as np
import pytest

from stochscp.problem import build_car_benchmark, default_config, make_linear_instance
from stochscp.scp import SCPOptions, initial_guess, run

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


@pytest.fixture(scope="session")
def car():
    return build_car_benchmark()


@pytest.fixture(scope="session")
def car_grid(car):
    return car.grid(default_config().N)


@pytest.fixture(scope="session")
def car_run(car, car_grid):
    return run(car, initial_guess(car, car_grid), SCPOptions())


def lq_instance(u_bound=1e3, noise=0.1):
    """Double integrator in x driven by a first-order lag in z, plus a direct
    control channel; constant diffusion so the covariance ignores controls."""
    A = [[0.0, 1.0], [0.0, 0.0]]
    F = [[0.0], [1.0]]
    B = [[0.0, 0.0], [0.5, 0.0]]
    D = [[-0.5]]
    E = [[0.0, 1.0]]
    C = noise * np.eye(2)
    return make_linear_instance(A, F, B, D, E, C, x0=[0.0, 0.0], z0=[0.0],
                                goal_x=[1.0, 0.0], goal_z=[0.0], u_bound=u_bound,
                                horizon=2.0, name="lq")


@pytest.fixture(scope="session")
def lq():
    return lq_instance()
