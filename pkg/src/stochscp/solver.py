"""Operator-splitting solver for convex QPs with one quadratic inequality.

The quadratic block with its linear equalities is handled by a proximal step
(one sparse KKT factorization), the control box by projection, and the two
are combined with Douglas-Rachford splitting. Once the splitting has settled
on an active set, a polishing solve recovers the exact KKT point. The single
trust-region constraint is dualized: its multiplier is found by bisection on
the monotone map ``nu -> trust_lhs(x(nu))``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .subproblem import ConvexSubproblem

log = logging.getLogger(__name__)

OPTIMAL = "OPTIMAL"
MAX_ITER = "MAX_ITER"
INFEASIBLE = "INFEASIBLE"


@dataclass(frozen=True)
class SolverOptions:
    eps_pri: float = 1e-8
    eps_dual: float = 1e-8
    max_iter: int = 50_000
    rho: float = 1.0
    alpha: float = 1.6
    polish_every: int = 10
    ruiz_iter: int = 15
    nu_max: float = 1e12
    max_bisect: int = 200


@dataclass
class SubproblemSolution:
    x: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    tr_multiplier: float
    objective: float
    iterations: int
    eq_duals: Optional[np.ndarray] = None
    trust_lhs: float = 0.0
    merit_history: list = field(default_factory=list)
    warm: Optional[dict] = None
    message: str = ""


# ---------------------------------------------------------------- residuals

def _box_active(x, lo, hi):
    tol_lo = 1e-9 * np.maximum(1.0, np.abs(lo))
    tol_hi = 1e-9 * np.maximum(1.0, np.abs(hi))
    return x <= lo + tol_lo, x >= hi - tol_hi


def kkt_residual(p: ConvexSubproblem, x, eq_duals=None, nu: float = 0.0) -> dict:
    """Stationarity, primal feasibility and complementarity (infinity norms).

    Without ``eq_duals`` the equality multipliers are the least-squares
    estimate over coordinates not held at a bound.
    """
    x = np.asarray(x, dtype=float)
    grad = p.P @ x + p.q
    if nu:
        grad = grad + nu * (2.0 * (p.tr_Q @ x) + p.tr_a)
    bi = p.box_idx
    at_lo, at_hi = _box_active(x[bi], p.box_lo, p.box_hi)
    if eq_duals is None:
        if p.Aeq.shape[0]:
            free = np.ones(p.n, dtype=bool)
            free[bi[at_lo | at_hi]] = False
            At = p.Aeq.T.tocsr()[free].toarray()
            lam = np.linalg.lstsq(At, -grad[free], rcond=None)[0]
        else:
            lam = np.zeros(0)
    else:
        lam = np.asarray(eq_duals, dtype=float)
    r = grad + p.Aeq.T @ lam if lam.size else grad.copy()
    stat = np.abs(r)
    rb = r[bi]
    stat[bi] = np.where(at_lo, np.maximum(-rb, 0.0), np.where(at_hi, np.maximum(rb, 0.0), np.abs(rb)))
    eq = np.abs(p.Aeq @ x - p.beq) if p.Aeq.shape[0] else np.zeros(0)
    box = np.maximum(np.maximum(p.box_lo - x[bi], x[bi] - p.box_hi), 0.0)
    lhs = p.trust_lhs(x)
    tr_viol = max(lhs - p.delta, 0.0) if np.isfinite(p.delta) else 0.0
    comp = nu * abs(p.delta - lhs) if nu else 0.0
    return {
        "stationarity": float(np.max(stat, initial=0.0)),
        "equality": float(np.max(eq, initial=0.0)),
        "box": float(np.max(box, initial=0.0)),
        "trust_region": float(tr_viol),
        "primal": float(max(np.max(eq, initial=0.0), np.max(box, initial=0.0), tr_viol)),
        "complementarity": float(comp),
        "eq_duals": lam,
    }


# ---------------------------------------------------------------- presolve

def _independent_rows(A: sp.spmatrix, b: np.ndarray):
    """Indices of a maximal independent row subset and a consistency flag."""
    m = A.shape[0]
    if m == 0:
        return np.arange(0), True
    dense = A.toarray()
    _, R, piv = sla.qr(dense.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(dense.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0) * 10
    rank = int(np.sum(diag > tol))
    keep = np.sort(piv[:rank])
    if rank == m:
        return keep, True
    x_ls = np.linalg.lstsq(dense[keep], b[keep], rcond=None)[0]
    resid = np.max(np.abs(dense @ x_ls - b))
    return keep, bool(resid <= 1e-9 * max(1.0, np.max(np.abs(b))))


def _ruiz(P, Aeq, iters):
    """Ruiz equilibration of the KKT matrix; returns (D, E, cost_scale)."""
    n, m = P.shape[0], Aeq.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps, As = P.tocsc(), Aeq.tocsc()
    for _ in range(iters):
        colP = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
        colA = np.abs(As).max(axis=0).toarray().ravel() if As.nnz else np.zeros(n)
        cn = np.maximum(colP, colA)
        rn = np.abs(As).max(axis=1).toarray().ravel() if As.nnz else np.zeros(m)
        dD = 1.0 / np.sqrt(np.where(cn < 1e-4, 1.0, cn))
        dE = 1.0 / np.sqrt(np.where(rn < 1e-4, 1.0, rn))
        Ps = sp.diags(dD) @ Ps @ sp.diags(dD)
        As = sp.diags(dE) @ As @ sp.diags(dD)
        D *= dD
        E *= dE
    return D, E


# ---------------------------------------------------------------- inner QP

class _InnerQP:
    """min 1/2 x'Px + q'x  s.t.  Aeq x = beq, box on a subset, via DR splitting."""

    def __init__(self, P, q, Aeq, beq, box_idx, lo, hi, D, E, opts: SolverOptions):
        self.opts = opts
        self.D, self.E = D, E
        Dm, Em = sp.diags(D), sp.diags(E)
        Ps = (Dm @ P @ Dm).tocsc()
        qs = D * q
        cscale = 1.0 / max(1e-6, min(1e6, max(np.abs(Ps).max() if Ps.nnz else 0.0,
                                                np.max(np.abs(qs), initial=0.0), 1e-6)))
        self.c = cscale
        self.P, self.q = (cscale * Ps).tocsc(), cscale * qs
        self.A = (Em @ Aeq @ Dm).tocsc()
        self.b = E * beq
        self.n, self.m = P.shape[0], Aeq.shape[0]
        self.box_idx = box_idx
        self.lo = lo / D[box_idx]
        self.hi = hi / D[box_idx]
        rho = opts.rho
        self.rho = rho
        K = sp.bmat([[self.P + rho * sp.identity(self.n), self.A.T],
                     [self.A, None]], format="csc") if self.m else (self.P + rho * sp.identity(self.n)).tocsc()
        self.lu = spla.splu(K)
        self.orig = (P, q, Aeq, beq, lo, hi)

    def prox_f(self, s):
        rhs = np.concatenate([self.rho * s - self.q, self.b]) if self.m else self.rho * s - self.q
        sol = self.lu.solve(rhs)
        return sol[:self.n], sol[self.n:]

    def proj(self, v):
        y = v.copy()
        y[self.box_idx] = np.clip(v[self.box_idx], self.lo, self.hi)
        return y

    def polish(self, lower, upper):
        """Equality-constrained solve with the guessed active bounds fixed."""
        act = np.concatenate([self.box_idx[lower], self.box_idx[upper]])
        vals = np.concatenate([self.lo[lower], self.hi[upper]])
        nA = act.size
        C = sp.vstack([self.A, sp.csr_matrix((np.ones(nA), (np.arange(nA), act)), shape=(nA, self.n))]).tocsc() \
            if nA else self.A
        rhs_c = np.concatenate([self.b, vals])
        mc = C.shape[0]
        reg = 1e-10
        K = sp.bmat([[self.P, C.T], [C, None]], format="csc") if mc else self.P.tocsc()
        Kreg = (K + sp.diags(np.concatenate([reg * np.ones(self.n), -reg * np.ones(mc)]))).tocsc()
        rhs = np.concatenate([-self.q, rhs_c])
        try:
            lu = spla.splu(Kreg)
        except RuntimeError:
            return None
        sol = lu.solve(rhs)
        for _ in range(8):
            res = rhs - K @ sol
            if np.max(np.abs(res)) < 1e-15 * max(1.0, np.max(np.abs(rhs))):
                break
            sol = sol + lu.solve(res)
        if not np.all(np.isfinite(sol)):
            return None
        xs = sol[:self.n]
        lam = sol[self.n:self.n + self.m]
        return self.D * xs, self.E * lam / self.c

    def unscale(self, xs, lam):
        return self.D * xs, self.E * lam / self.c


def _verify(p, x, lam, nu, opts):
    kk = kkt_residual(p, x, lam, nu)
    return kk, kk["stationarity"] <= opts.eps_dual and kk["equality"] <= opts.eps_pri and kk["box"] <= opts.eps_pri


def _solve_inner(p: ConvexSubproblem, nu, keep, D, E, opts, warm_s=None, merit=None):
    """Solve the nu-augmented QP; returns (x, lam_full, status, iters, s, kkt)."""
    P = (p.P + 2.0 * nu * p.tr_Q).tocsc() if nu else p.P
    q = p.q + nu * p.tr_a if nu else p.q
    Aeq = p.Aeq[keep]
    beq = p.beq[keep]
    qp = _InnerQP(P, q, Aeq, beq, p.box_idx, p.box_lo, p.box_hi, D, E, opts)
    pn = replace(p, P=P, q=q, tr_Q=p.tr_Q * 0.0, tr_a=p.tr_a * 0.0, Aeq=Aeq, beq=beq,
                 delta=np.inf)

    def full_lam(lam_keep):
        lam = np.zeros(p.Aeq.shape[0])
        lam[keep] = lam_keep
        return lam

    s = np.zeros(qp.n) if warm_s is None or warm_s.shape != (qp.n,) else warm_s.copy()
    last_guess = None
    merit_list = merit if merit is not None else []
    prev_ds = None
    kk = None
    x = y = s
    for it in range(1, opts.max_iter + 1):
        x, _ = qp.prox_f(s)
        v = 2.0 * x - s
        y = qp.proj(v)
        ds = opts.alpha * (y - x)
        s = s + ds
        merit_list.append(float(np.linalg.norm(ds)))
        if it == 1 or it % opts.polish_every == 0:
            vb = v[qp.box_idx]
            lower, upper = vb < qp.lo, vb > qp.hi
            guess = (lower.tobytes(), upper.tobytes())
            if guess != last_guess:
                last_guess = guess
                out = qp.polish(lower, upper)
                if out is not None:
                    xp, lp = out
                    kk, ok = _verify(pn, xp, lp, 0.0, opts)
                    if ok:
                        return xp, full_lam(lp), OPTIMAL, it, s, kk
        if it % 50 == 0 and it >= 200:
            # persistent constant displacement certifies an empty intersection
            gap = np.linalg.norm(x - y)
            if prev_ds is not None and gap > 1e3 * max(opts.eps_pri, 1e-12):
                if np.linalg.norm(ds - prev_ds) <= 1e-7 * np.linalg.norm(ds):
                    xu, lu_ = qp.unscale(x, np.zeros(qp.m))
                    return xu, full_lam(lu_), INFEASIBLE, it, s, None
            prev_ds = ds.copy()
    xu, _ = qp.unscale(y, np.zeros(qp.m))
    kk = kkt_residual(pn, xu, None, 0.0)
    return xu, full_lam(kk["eq_duals"]), MAX_ITER, opts.max_iter, s, kk


def solve(p: ConvexSubproblem, opts: Optional[SolverOptions] = None,
          warm: Optional[dict] = None) -> SubproblemSolution:
    """Solve the QCQP; deterministic for identical inputs."""
    opts = opts or SolverOptions()
    keep, consistent = _independent_rows(p.Aeq, p.beq)
    if not consistent:
        x = np.zeros(p.n)
        return SubproblemSolution(x, INFEASIBLE, np.inf, np.inf, 0.0, np.nan, 0,
                                  message="inconsistent equality constraints")
    if p.delta <= opts.eps_pri:
        deg = _solve_degenerate(p, opts, warm)
        # only degenerate when the radius sits at the minimum of the quadratic
        if deg.status != OPTIMAL or deg.trust_lhs >= p.delta - opts.eps_pri:
            return deg
    D, E = _ruiz(p.P + p.tr_Q, p.Aeq[keep], opts.ruiz_iter)
    warm_s = None if warm is None else warm.get("s")
    merit: list = []
    total = 0

    def inner(nu, ws):
        nonlocal total
        x, lam, status, its, s, _ = _solve_inner(p, nu, keep, D, E, opts, ws, merit if nu == 0 else None)
        total += its
        return x, lam, status, s

    x, lam, status, s = inner(0.0, warm_s)
    nu = 0.0
    tol_tr = opts.eps_pri * max(1.0, p.delta if np.isfinite(p.delta) else 1.0)
    if status == OPTIMAL and np.isfinite(p.delta) and p.trust_lhs(x) > p.delta:
        # bracket the multiplier, then bisect keeping the feasible end
        nu_lo, nu_hi = 0.0, max(1.0, float(np.max(np.abs(p.q), initial=1.0)))
        x_hi, lam_hi, st_hi, s_hi = inner(nu_hi, s)
        while st_hi == OPTIMAL and p.trust_lhs(x_hi) > p.delta:
            nu_lo = nu_hi
            nu_hi *= 10.0
            if nu_hi > opts.nu_max:
                # the radius is at or below the smallest reachable value
                return _solve_degenerate(p, opts, warm)
            x_hi, lam_hi, st_hi, s_hi = inner(nu_hi, s_hi)
        status = st_hi
        for _ in range(opts.max_bisect):
            if status != OPTIMAL or p.delta - p.trust_lhs(x_hi) <= tol_tr:
                break
            if nu_hi - nu_lo <= 1e-15 * nu_hi:
                break
            mid = 0.5 * (nu_lo + nu_hi)
            xm, lm, sm, ssm = inner(mid, s_hi)
            if sm != OPTIMAL:
                status = sm
                break
            if p.trust_lhs(xm) > p.delta:
                nu_lo = mid
            else:
                nu_hi, x_hi, lam_hi, s_hi = mid, xm, lm, ssm
        x, lam, nu, s = x_hi, lam_hi, nu_hi, s_hi
    return _finish(p, x, lam, nu, status, total, merit, s)


def _solve_degenerate(p, opts, warm):
    """Radius at the minimum of the trust-region quadratic.

    The minimizers of a convex quadratic over the feasible set share ``Qx``
    and ``a'x``; the objective is then minimized over that affine slice."""
    proj = replace(p, P=2.0 * p.tr_Q, q=p.tr_a.copy(), c0=p.tr_c, delta=np.inf)
    sol = solve(proj, opts, warm)
    if sol.status != OPTIMAL:
        return replace(sol, objective=p.objective(sol.x))
    lhs = p.trust_lhs(sol.x)
    if lhs > p.delta + opts.eps_pri * max(1.0, abs(p.delta)):
        return replace(sol, status=INFEASIBLE, objective=p.objective(sol.x), trust_lhs=lhs,
                       message="trust region cannot be met")
    Q = sp.csr_matrix(p.tr_Q)
    live = np.flatnonzero(np.diff(Q.indptr))
    extra = sp.vstack([Q[live], sp.csr_matrix(p.tr_a[None, :])])
    fixed = extra @ sol.x
    sliced = replace(p, Aeq=sp.vstack([p.Aeq, extra]).tocsc(),
                     beq=np.concatenate([p.beq, fixed]), delta=np.inf)
    fin = solve(sliced, opts, warm)
    if fin.status != OPTIMAL:
        fin = sol
    m = p.Aeq.shape[0]
    lam = None if fin.eq_duals is None else fin.eq_duals[:m]
    return replace(fin, objective=p.objective(fin.x), trust_lhs=p.trust_lhs(fin.x),
                   tr_multiplier=np.inf, eq_duals=lam)


def _finish(p, x, lam, nu, status, iters, merit, s, message=""):
    kk = kkt_residual(p, x, lam, nu)
    if status == OPTIMAL and kk["trust_region"] > 0 and kk["trust_region"] > 1e-8 * max(1.0, p.delta):
        status = MAX_ITER
    return SubproblemSolution(
        x=x, status=status,
        primal_residual=kk["primal"], dual_residual=kk["stationarity"],
        tr_multiplier=float(nu), objective=p.objective(x), iterations=iters,
        eq_duals=lam, trust_lhs=p.trust_lhs(x), merit_history=merit,
        warm={"s": s}, message=message,
    )
