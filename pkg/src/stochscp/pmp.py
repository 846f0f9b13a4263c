"""Surrogate first-order optimality check on the linearized mean system.

The costate runs over the stacked deterministic state ``(mu, z)``. Noise
coupling and the martingale part of the stochastic costate are dropped, so
every output from this module is labelled a *surrogate* PMP residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linearize import LinearizedCost, LTVCoefficients
from .moments import Iterate
from .problem import OCPInstance, TimeGrid
from .solver import SubproblemSolution
from .subproblem import ConvexSubproblem

LABEL = "surrogate PMP residual"
UNAVAILABLE = "UNAVAILABLE"


@dataclass(frozen=True)
class AdjointTrajectory:
    p: np.ndarray         # (N, n_x + n_z)
    p0: float
    terminal: np.ndarray  # (n_x + n_z,)
    Bhat: np.ndarray      # (N-1, n_x + n_z, m) stacked control maps

    @property
    def n_nodes(self) -> int:
        return self.p.shape[0]


def _stacked(coeffs: LTVCoefficients):
    S, nx = coeffs.A.shape[:2]
    nz = coeffs.D.shape[1]
    Ahat = np.zeros((S, nx + nz, nx + nz))
    Ahat[:, :nx, :nx] = coeffs.A
    Ahat[:, :nx, nx:] = coeffs.F
    Ahat[:, nx:, nx:] = coeffs.D
    Bhat = np.concatenate([coeffs.Bmap, coeffs.Emap], axis=1)
    return Ahat, Bhat


def terminal_multiplier(p: ConvexSubproblem, sol: SubproblemSolution) -> np.ndarray:
    """Terminal costate read off the equality duals of a solved subproblem.

    Dynamics rows are written ``s_{i+1} - Phi s_i - ... = c``, so the costate
    is the negated dual of the terminal rows.
    """
    lam = np.asarray(sol.eq_duals, dtype=float)
    rows = np.concatenate([p.rows["terminal_x"].ravel(), p.rows["terminal_z"].ravel()])
    return -lam[rows]


def backward_adjoint(coeffs: LTVCoefficients, lin_cost: LinearizedCost, terminal,
                     grid: TimeGrid, p0: float = -1.0) -> AdjointTrajectory:
    """``p_i = p_{i+1} + h (Ahat_i^T p_{i+1} + p0 * (g_i, 0))``, ``p_{N-1} = terminal``."""
    Ahat, Bhat = _stacked(coeffs)
    S, n = Ahat.shape[:2]
    nx = coeffs.A.shape[1]
    h = grid.h
    p = np.empty((S + 1, n))
    p[S] = np.asarray(terminal, dtype=float)
    grad = np.zeros(n)
    for i in range(S - 1, -1, -1):
        grad[:nx] = lin_cost.grad[i]
        p[i] = p[i + 1] + h * (Ahat[i].T @ p[i + 1] + p0 * grad)
    return AdjointTrajectory(p=p, p0=float(p0), terminal=p[S].copy(), Bhat=Bhat)


def maximizing_control(adj: AdjointTrajectory, inst: OCPInstance) -> np.ndarray:
    """Pointwise Hamiltonian maximizer over the control box, per stage."""
    r = inst.control_weight
    raw = np.einsum("sij,si->sj", adj.Bhat, adj.p[1:]) / (-2.0 * adj.p0 * r)
    return np.clip(raw, inst.u_lo, inst.u_hi)


def maximality_residual(adj: AdjointTrajectory, it: Iterate, inst: OCPInstance, grid: TimeGrid):
    """``max_i |u_i - argmax H_i|``.

    Instances fix ``G(u) = r |u|^2`` so the maximizer is closed form; for an
    abnormal costate (``p0 = 0``) the Hamiltonian is linear in ``u`` and the
    check reports ``UNAVAILABLE``.
    """
    if adj.p0 == 0:
        return UNAVAILABLE
    ustar = maximizing_control(adj, inst)
    return float(np.max(np.linalg.norm(np.asarray(it.u) - ustar, axis=1), initial=0.0))


def surrogate_residual(inst: OCPInstance, p: ConvexSubproblem, sol: SubproblemSolution,
                       coeffs: LTVCoefficients, lin_cost: LinearizedCost, grid: TimeGrid) -> dict:
    """Run the full check on a solved subproblem and report it under ``LABEL``."""
    adj = backward_adjoint(coeffs, lin_cost, terminal_multiplier(p, sol), grid)
    it = p.layout.unpack(sol.x)
    res = maximality_residual(adj, it, inst, grid)
    return {
        "label": LABEL,
        "residual": res,
        "p0": adj.p0,
        "terminal_multiplier": adj.terminal.tolist(),
        "nontrivial": bool(np.hypot(np.linalg.norm(adj.terminal), adj.p0) > 0),
    }
