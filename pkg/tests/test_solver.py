from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from stochscp.solver import INFEASIBLE, OPTIMAL, SolverOptions, kkt_residual, solve
from stochscp.subproblem import ConvexSubproblem

from .oracles import dense_qcqp_oracle


def qcqp(P, q, Aeq=None, beq=None, box_idx=(), lo=(), hi=(), tr_Q=None, tr_a=None, tr_c=0.0,
         delta=np.inf, c0=0.0):
    P = np.atleast_2d(np.asarray(P, float))
    n = P.shape[0]
    Aeq = np.zeros((0, n)) if Aeq is None else np.atleast_2d(np.asarray(Aeq, float))
    beq = np.zeros(0) if beq is None else np.asarray(beq, float)
    tr_Q = np.zeros((n, n)) if tr_Q is None else np.atleast_2d(np.asarray(tr_Q, float))
    tr_a = np.zeros(n) if tr_a is None else np.asarray(tr_a, float)
    return ConvexSubproblem(
        P=sp.csc_matrix(P), q=np.asarray(q, float), c0=c0, Aeq=sp.csc_matrix(Aeq), beq=beq,
        box_idx=np.asarray(box_idx, dtype=int), box_lo=np.asarray(lo, float),
        box_hi=np.asarray(hi, float), tr_Q=sp.csc_matrix(tr_Q), tr_a=tr_a, tr_c=float(tr_c),
        delta=float(delta))


def test_single_equality_example():
    # min u^2 subject to u = 3
    sol = solve(qcqp([[2.0]], [0.0], [[1.0]], [3.0]))
    assert sol.status == OPTIMAL
    assert sol.x[0] == pytest.approx(3.0, abs=1e-12)
    assert sol.objective == pytest.approx(9.0, abs=1e-10)


def test_ball_away_from_origin():
    # min |u|^2 subject to |u - (2, 0)|^2 <= 1
    c = np.array([2.0, 0.0])
    p = qcqp(2 * np.eye(2), [0.0, 0.0], tr_Q=np.eye(2), tr_a=-2 * c, tr_c=c @ c, delta=1.0)
    sol = solve(p)
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, [1.0, 0.0], atol=1e-7)
    assert sol.objective == pytest.approx(1.0, abs=1e-7)


def test_scalar_box_example():
    # min (u - 5)^2 with u in [-3, 3]
    sol = solve(qcqp([[2.0]], [-10.0], box_idx=[0], lo=[-3.0], hi=[3.0], c0=25.0))
    assert sol.status == OPTIMAL
    assert sol.x[0] == pytest.approx(3.0, abs=1e-9)
    assert sol.objective == pytest.approx(4.0, abs=1e-8)


def test_ball_example():
    # min |u - (2, 0)|^2 subject to |u|^2 <= 1
    p = qcqp(2 * np.eye(2), [-4.0, 0.0], tr_Q=np.eye(2), tr_c=0.0, delta=1.0, c0=4.0)
    sol = solve(p)
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, [1.0, 0.0], atol=1e-7)
    assert sol.objective == pytest.approx(1.0, abs=1e-7)
    # stationarity 2(u - 2) + 2 nu u = 0 at u = 1 gives nu = 1
    assert sol.tr_multiplier == pytest.approx(1.0, abs=1e-6)


def test_ball_with_offset_centre():
    # |u - c|^2 <= 4 written as u'u - 2c'u + c'c <= 4
    c = np.array([1.0, 1.0])
    p = qcqp(2 * np.eye(2), [6.0, 6.0], tr_Q=np.eye(2), tr_a=-2 * c, tr_c=c @ c, delta=4.0)
    sol = solve(p)
    expect = c - 2.0 * c / np.linalg.norm(c)
    np.testing.assert_allclose(sol.x, expect, atol=1e-7)


def test_equality_constrained_matches_dense_kkt():
    rng = np.random.default_rng(0)
    n, m = 8, 3
    G = rng.normal(size=(n, n))
    P = G @ G.T + 0.1 * np.eye(n)
    q = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    sol = solve(qcqp(P, q, A, b))
    K = np.block([[P, A.T], [A, np.zeros((m, m))]])
    ref = np.linalg.solve(K, np.concatenate([-q, b]))
    np.testing.assert_allclose(sol.x, ref[:n], atol=1e-7)
    np.testing.assert_allclose(sol.eq_duals, ref[n:], atol=1e-6)


def test_redundant_and_inconsistent_rows():
    A = np.array([[1.0, 1.0], [2.0, 2.0]])
    sol = solve(qcqp(np.eye(2), [0.0, 0.0], A, [1.0, 2.0]))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, [0.5, 0.5], atol=1e-8)
    assert solve(qcqp(np.eye(2), [0.0, 0.0], A, [1.0, 3.0])).status == INFEASIBLE


def test_infeasible_box_and_equality():
    p = qcqp(np.eye(1), [0.0], [[1.0]], [5.0], box_idx=[0], lo=[-1.0], hi=[1.0])
    assert solve(p).status == INFEASIBLE


def test_kkt_residual_examples():
    p = qcqp([[2.0]], [-10.0], box_idx=[0], lo=[-3.0], hi=[3.0])
    r = kkt_residual(p, np.array([3.0]))
    assert r["stationarity"] == 0.0 and r["primal"] == 0.0
    r = kkt_residual(p, np.array([0.0]))
    assert r["stationarity"] == pytest.approx(10.0)
    r = kkt_residual(p, np.array([4.0]))
    assert r["box"] == pytest.approx(1.0) and r["primal"] == pytest.approx(1.0)
    ball = qcqp(2 * np.eye(2), [-4.0, 0.0], tr_Q=np.eye(2), delta=1.0)
    r = kkt_residual(ball, np.array([1.0, 0.0]), nu=1.0)
    assert r["stationarity"] == pytest.approx(0.0, abs=1e-15)
    assert r["complementarity"] == pytest.approx(0.0, abs=1e-15)
    r = kkt_residual(ball, np.array([2.0, 0.0]))
    assert r["trust_region"] == pytest.approx(3.0)


def test_kkt_residual_of_solver_output_and_reference(car, car_grid):
    from stochscp.checks import probe_controls, reference_rollout
    from stochscp.linearize import linearize
    from stochscp.moments import propagate
    from stochscp.subproblem import build

    ref = reference_rollout(car, probe_controls(car, car_grid), car_grid)
    coeffs, cost = linearize(car, ref, car_grid)
    p = build(car, coeffs, cost, ref, np.inf, car_grid)
    sol = solve(p)
    r = kkt_residual(p, sol.x, sol.eq_duals, sol.tr_multiplier)
    assert sol.status == OPTIMAL
    assert max(r["stationarity"], r["primal"], r["complementarity"]) < 1e-7
    # the propagated reference only misses the terminal rows
    it = propagate(coeffs, ref.u, car.x0, car.z0, car_grid)
    r = kkt_residual(p, p.layout.pack_iterate(it))
    gap = np.concatenate([it.mu[-1] - car.goal_x, it.z[-1] - car.goal_z])
    assert r["primal"] == pytest.approx(np.max(np.abs(gap)), rel=1e-12)


def test_kkt_residual_zero_candidate():
    r = kkt_residual(qcqp(2 * np.eye(3), np.zeros(3)), np.zeros(3))
    assert r["stationarity"] == r["primal"] == r["complementarity"] == 0.0


def test_merit_is_monotone_and_solution_deterministic():
    rng = np.random.default_rng(4)
    n = 12
    G = rng.normal(size=(n, n))
    p = qcqp(G @ G.T, rng.normal(size=n), rng.normal(size=(4, n)), rng.normal(size=4),
             box_idx=np.arange(6), lo=-0.2 * np.ones(6), hi=0.2 * np.ones(6))
    opts = SolverOptions(polish_every=10**9)  # pure splitting, no polish shortcut
    a = solve(p, opts)
    b = solve(p, opts)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.merit_history == b.merit_history
    h = np.array(a.merit_history)
    assert h.size > 2
    assert np.all(np.diff(h) <= 1e-12 * max(1.0, h[0]))


def _random_instance(rng, boxed):
    n = int(rng.integers(3, 13))
    m = int(rng.integers(0, n // 2 + 1))
    rank = int(rng.integers(1, n + 1))
    G = rng.normal(size=(n, rank))
    P = G @ G.T + 1e-2 * np.eye(n)
    q = 3.0 * rng.normal(size=n)
    A = rng.normal(size=(m, n))
    x_feas = rng.uniform(-0.5, 0.5, n)
    b = A @ x_feas
    Lq = rng.normal(size=(n, n))
    tr_Q = Lq @ Lq.T / n
    tr_a = rng.normal(size=n)
    tr_c = float(rng.normal())
    lhs = x_feas @ tr_Q @ x_feas + tr_a @ x_feas + tr_c
    delta = lhs + float(rng.choice([0.01, 0.5, 5.0, 1e6]))
    if boxed:
        k = int(rng.integers(1, n + 1))
        idx = np.sort(rng.choice(n, k, replace=False))
        return qcqp(P, q, A, b, idx, -np.ones(k), np.ones(k), tr_Q, tr_a, tr_c, delta)
    return qcqp(P, q, A, b, tr_Q=tr_Q, tr_a=tr_a, tr_c=tr_c, delta=delta)


def _cvxpy_reference(p):
    import cvxpy as cp

    n = p.n
    x = cp.Variable(n)
    P = p.P.toarray()
    Q = p.tr_Q.toarray()
    cons = [cp.quad_form(x, cp.psd_wrap(Q)) + p.tr_a @ x + p.tr_c <= p.delta]
    if p.Aeq.shape[0]:
        cons.append(p.Aeq.toarray() @ x == p.beq)
    if p.box_idx.size:
        cons += [x[p.box_idx] >= p.box_lo, x[p.box_idx] <= p.box_hi]
    prob = cp.Problem(cp.Minimize(0.5 * cp.quad_form(x, cp.psd_wrap(P)) + p.q @ x), cons)
    try:
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    except cp.error.SolverError:
        prob.solve(solver=cp.CLARABEL)
    return prob.value


@pytest.mark.parametrize("boxed", [False, True])
def test_random_qcqps_against_oracles(boxed):
    rng = np.random.default_rng(2024 + boxed)
    worst, infeasible = 0.0, 0
    for _ in range(50):
        p = _random_instance(rng, boxed)
        sol = solve(p)
        if sol.status == INFEASIBLE:
            infeasible += 1
            continue
        assert sol.status == OPTIMAL
        assert sol.primal_residual < 1e-7
        if boxed:
            f_ref = _cvxpy_reference(p)
        else:
            x_ref, _ = dense_qcqp_oracle(p.P.toarray(), p.q, p.Aeq.toarray(), p.beq,
                                         p.tr_Q.toarray(), p.tr_a, p.tr_c, p.delta)
            f_ref = p.objective(x_ref)
        worst = max(worst, abs(sol.objective - f_ref) / max(1.0, abs(f_ref)))
    assert infeasible == 0
    assert worst < 1e-6
