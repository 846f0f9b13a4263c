"""Outer sequential convex programming loop with a shrinking trust region."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .linearize import LinearizedCost, LTVCoefficients, linearize
from .moments import Iterate, difference_covariance
from .problem import OCPInstance, TimeGrid
from .solver import INFEASIBLE, SolverOptions, SubproblemSolution, solve
from .subproblem import ConvexSubproblem, build

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SCPOptions:
    delta0: float = 100.0
    shrink: float = 0.99
    tol: float = 1e-3
    max_iter: int = 100
    solver: SolverOptions = field(default_factory=SolverOptions)
    warm_start: bool = True


@dataclass
class IterationRecord:
    k: int
    delta: float
    objective: float
    metric: Optional[float]
    usage: float
    strict: bool
    trace_sigma_l2: float
    status: str
    tr_multiplier: float
    primal_residual: float
    dual_residual: float
    solver_iterations: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SCPResult:
    history: list
    records: list
    converged: bool
    iterations: int
    message: str = ""
    coeffs: Optional[LTVCoefficients] = None
    lin_cost: Optional[LinearizedCost] = None
    subproblem: Optional[ConvexSubproblem] = None
    solution: Optional[SubproblemSolution] = None
    wall_time: float = 0.0

    @property
    def final(self) -> Iterate:
        return self.history[-1]


def initial_guess(inst: OCPInstance, grid: TimeGrid) -> Iterate:
    """Straight line from the initial state to the goal with zero controls.

    Instances may override this through ``inst.initial_guess``.
    """
    if inst.initial_guess is not None:
        return inst.initial_guess(grid)
    s = np.linspace(0.0, 1.0, grid.n_nodes)[:, None]
    return Iterate(
        u=np.zeros((grid.n_stages, inst.m)),
        mu=(1 - s) * inst.x0 + s * inst.goal_x,
        z=(1 - s) * inst.z0 + s * inst.goal_z,
        Sigma=np.zeros((grid.n_nodes, inst.n_x, inst.n_x)),
    )


def convergence_metric(u_next, u_curr, u_prev, grid: TimeGrid) -> float:
    """Left Riemann sum of ``|u_next - u_curr|^2 + |u_curr - u_prev|^2``."""
    a = np.asarray(u_next) - np.asarray(u_curr)
    b = np.asarray(u_curr) - np.asarray(u_prev)
    return float(grid.h * (np.sum(a * a) + np.sum(b * b)))


def trust_region_lhs(curr: Iterate, prev: Iterate, grid: TimeGrid, diff_cov=None) -> float:
    """Discretized ``int E|x_curr - x_prev|^2 dt`` over the stages.

    ``diff_cov`` is the per-node covariance of ``x_curr - x_prev``. Without it
    the two processes are taken as perfectly aligned (same noise directions),
    which gives ``tr = (sqrt(tr Sigma_c) - sqrt(tr Sigma_p))^2``.
    """
    S, h = grid.n_stages, grid.h
    if diff_cov is None:
        tc = np.maximum(curr.trace_sigma()[:S], 0.0)
        tp = np.maximum(prev.trace_sigma()[:S], 0.0)
        tr_e = (np.sqrt(tc) - np.sqrt(tp)) ** 2
    else:
        tr_e = np.trace(np.asarray(diff_cov), axis1=1, axis2=2)[:S]
    dmu = curr.mu[:S] - prev.mu[:S]
    return float(h * np.sum(tr_e + np.sum(dmu * dmu, axis=1)))


def strict_trust_region_check(curr: Iterate, prev: Iterate, delta: float, grid: TimeGrid,
                              diff_cov=None):
    """``(lhs < delta, lhs / delta)`` for consecutive iterates."""
    lhs = trust_region_lhs(curr, prev, grid, diff_cov)
    usage = lhs / delta if delta > 0 else (0.0 if lhs == 0 else np.inf)
    return bool(lhs < delta), float(usage)


def run(inst: OCPInstance, init: Iterate, opts: Optional[SCPOptions] = None,
        on_iteration: Optional[Callable] = None, on_subproblem: Optional[Callable] = None) -> SCPResult:
    """Linearize, build, solve, shrink; repeat until the control metric settles."""
    opts = opts or SCPOptions()
    if not opts.delta0 > 0:
        raise ValueError("delta0 must be positive")
    grid = inst.grid(init.n_nodes)
    t0 = time.perf_counter()
    history = [init]
    records = []
    coeff_hist: list = [None]
    delta = float(opts.delta0)
    warm = None
    result = SCPResult(history=history, records=records, converged=False, iterations=0)
    for k in range(1, opts.max_iter + 1):
        ref = history[-1]
        coeffs, lin_cost = linearize(inst, ref, grid)
        p = build(inst, coeffs, lin_cost, ref, delta, grid)
        if on_subproblem is not None:
            on_subproblem(k, p)
        sol = solve(p, opts.solver, warm if opts.warm_start else None)
        result.coeffs, result.lin_cost, result.subproblem, result.solution = coeffs, lin_cost, p, sol
        if sol.status == INFEASIBLE:
            result.message = f"subproblem {k} infeasible: {sol.message or 'no feasible point'}"
            log.warning(result.message)
            break
        warm = sol.warm
        new = p.layout.unpack(sol.x)
        history.append(new)
        coeff_hist.append(coeffs)
        prev_coeffs = coeff_hist[-2]
        if prev_coeffs is None:
            # the initial guess is a deterministic curve
            diff_cov = new.Sigma
        else:
            diff_cov = difference_covariance(coeffs, new, prev_coeffs, ref, grid)
        strict, usage = strict_trust_region_check(new, ref, delta, grid, diff_cov)
        metric = None
        if k >= 2:
            metric = convergence_metric(new.u, ref.u, history[-3].u, grid)
        tr = new.trace_sigma()[:grid.n_stages]
        rec = IterationRecord(
            k=k, delta=delta, objective=sol.objective, metric=metric, usage=usage,
            strict=strict, trace_sigma_l2=float(np.sqrt(grid.h * np.sum(tr * tr))),
            status=sol.status, tr_multiplier=sol.tr_multiplier,
            primal_residual=sol.primal_residual, dual_residual=sol.dual_residual,
            solver_iterations=sol.iterations,
        )
        records.append(rec)
        result.iterations = k
        log.info("scp k=%d delta=%.6g obj=%.8g metric=%s usage=%.3e status=%s",
                 k, delta, sol.objective, "-" if metric is None else f"{metric:.3e}", usage, sol.status)
        if on_iteration is not None:
            on_iteration(rec, new)
        if metric is not None and metric <= opts.tol:
            result.converged = True
            result.message = f"converged after {k} iterations"
            break
        delta = delta * opts.shrink
    else:
        result.message = f"no convergence within {opts.max_iter} iterations"
    result.wall_time = time.perf_counter() - t0
    return result
