"""Pre-flight audits: analytic Jacobians, moments against Monte Carlo, and
convexity of the first subproblem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linearize import check_jacobians, linearize, linearized_instance
from .moments import Iterate, propagate
from .montecarlo import empirical_moments, simulate
from .problem import OCPInstance, TimeGrid
from .scp import initial_guess
from .subproblem import build, convexity_audit


@dataclass(frozen=True)
class AuditResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


def random_points(inst: OCPInstance, n: int, seed: int = 0, spread: float = 3.0):
    """Seeded ``(t, u, x, z)`` samples inside the control box."""
    rng = np.random.default_rng(seed)
    pts = []
    for _ in range(n):
        pts.append((
            float(rng.uniform(0.0, inst.horizon)),
            rng.uniform(inst.u_lo, inst.u_hi),
            rng.uniform(-spread, spread, inst.n_x),
            rng.uniform(-spread, spread, inst.n_z),
        ))
    return pts


def jacobian_audit(inst: OCPInstance, n_points: int = 100, seed: int = 0,
                   step: float = 1e-5, threshold: float = 1e-6) -> AuditResult:
    errs = [check_jacobians(inst, pt, step) for pt in random_points(inst, n_points, seed)]
    worst = float(max(errs, default=0.0))
    return AuditResult("jacobians", worst < threshold, worst, threshold,
                       f"{n_points} points, central differences, step {step:g}")


def probe_controls(inst: OCPInstance, grid: TimeGrid, fraction: float = 0.3) -> np.ndarray:
    """Smooth excitation inside the box: a half cosine per control channel."""
    mid = 0.5 * (inst.u_lo + inst.u_hi)
    half = 0.5 * (inst.u_hi - inst.u_lo)
    shape = np.cos(np.pi * grid.times[:-1] / grid.horizon)[:, None]
    gains = fraction * (1.0 + 0.5 * np.arange(inst.m) / max(inst.m, 1))
    return mid + half * gains * shape


def reference_rollout(inst: OCPInstance, controls, grid: TimeGrid) -> Iterate:
    """Noise-free Euler rollout of the non-linear drift."""
    u = np.asarray(controls, dtype=float)
    mu = np.empty((grid.n_nodes, inst.n_x))
    z = np.empty((grid.n_nodes, inst.n_z))
    mu[0], z[0] = inst.x0, inst.z0
    t = grid.times
    for i in range(grid.n_stages):
        mu[i + 1] = mu[i] + grid.h * np.asarray(inst.drift_x(t[i], u[i], mu[i], z[i]), float)
        z[i + 1] = z[i] + grid.h * np.asarray(inst.drift_z(t[i], u[i], z[i]), float)
    return Iterate(u=u.copy(), mu=mu, z=z, Sigma=np.zeros((grid.n_nodes, inst.n_x, inst.n_x)))


def moment_audit(inst: OCPInstance, grid: TimeGrid, M: int = 20000, seed: int = 0,
                 n_se: float = 5.0) -> AuditResult:
    """Propagated moments of the linearized SDE against an Euler-Maruyama
    ensemble of the same linear SDE.

    The linearization is taken about a noise-free rollout so the frozen
    covariance factor matches the simulated diffusion. Covariance bands are
    ``n_se`` standard errors plus the exact gap between the forward-Euler
    covariance step and the Euler-Maruyama covariance step (order ``h^2``).
    """
    u = probe_controls(inst, grid)
    ref = reference_rollout(inst, u, grid)
    coeffs, _ = linearize(inst, ref, grid)
    it = propagate(coeffs, u, inst.x0, inst.z0, grid)
    lin = linearized_instance(inst, coeffs, grid)
    ens = simulate(lin, u, grid, M, seed)
    mean, cov = empirical_moments(ens)

    # exact covariance of the Euler-Maruyama recursion
    nx = inst.n_x
    em = np.zeros((grid.n_nodes, nx, nx))
    for i in range(grid.n_stages):
        Phi = np.eye(nx) + grid.h * coeffs.A[i]
        C = coeffs.diffusion(i, it.z[i])
        em[i + 1] = Phi @ em[i] @ Phi.T + grid.h * C @ C.T
    scheme_gap = np.abs(it.Sigma - em)

    var = np.maximum(np.diagonal(cov, axis1=1, axis2=2), 0.0)
    se_cov = np.sqrt((var[:, :, None] * var[:, None, :] + cov ** 2) / (M - 1))
    se_mean = np.sqrt(var / M)
    # round-off floor so noise-free instances compare exactly
    floor = 1e-9 * max(1.0, float(np.max(np.abs(it.mu))), float(np.max(np.abs(it.Sigma))))
    ratio = max(
        float(np.max(np.abs(it.Sigma - cov) / (n_se * se_cov + scheme_gap + floor))),
        float(np.max(np.abs(it.mu - mean) / (n_se * se_mean + floor))),
    )
    return AuditResult("moments", ratio <= 1.0, ratio, 1.0,
                       f"{M} paths, seed {seed}, worst deviation over its "
                       f"{n_se:g}-standard-error band")


def subproblem_audit(inst: OCPInstance, grid: TimeGrid, delta: float = 100.0) -> AuditResult:
    ref = initial_guess(inst, grid)
    coeffs, cost = linearize(inst, ref, grid)
    rep = convexity_audit(build(inst, coeffs, cost, ref, delta, grid))
    failed = sorted(k for k, v in rep.items() if k != "passed" and v is False)
    return AuditResult("convexity", bool(rep["passed"]), float(len(failed)), 0.0,
                       "failed: " + ", ".join(failed) if failed else "all blocks convex")


def run_checks(inst: OCPInstance, grid: TimeGrid, seed: int = 0, paths: int = 20000,
               jac_points: int = 100, delta: float = 100.0) -> list:
    return [
        jacobian_audit(inst, jac_points, seed),
        moment_audit(inst, grid, paths, seed),
        subproblem_audit(inst, grid, delta),
    ]


def format_table(results) -> str:
    lines = [f"{'audit':<12}{'status':<8}{'value':>14}{'threshold':>14}  detail"]
    for r in results:
        lines.append(f"{r.name:<12}{'PASS' if r.passed else 'FAIL':<8}{r.value:>14.3e}"
                     f"{r.threshold:>14.3e}  {r.detail}")
    return "\n".join(lines)
