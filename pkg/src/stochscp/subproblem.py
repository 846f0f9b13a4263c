"""Assemble the deterministic convex program for one SCP iteration.

Decision vector layout (all row-major, stacked)::

    [ u_0 .. u_{N-2} | mu_0 .. mu_{N-1} | z_0 .. z_{N-1} | s_0 .. s_{N-1} ]

where ``s_i`` is the packed upper triangle of ``Sigma_i``. The program is::

    min  1/2 x'Px + q'x + c0
    s.t. Aeq x = beq,   lo <= x[box_idx] <= hi,   x'Qx + a'x + c <= delta
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .linearize import LinearizedCost, LTVCoefficients
from .moments import Iterate, discretize, pack, packed_size, trace_mask, unpack
from .problem import OCPInstance, TimeGrid


@dataclass(frozen=True)
class Layout:
    n_nodes: int
    n_x: int
    n_z: int
    m: int

    @property
    def n_stages(self):
        return self.n_nodes - 1

    @property
    def kp(self):
        return packed_size(self.n_x)

    @property
    def offsets(self):
        nu = self.n_stages * self.m
        nmu = self.n_nodes * self.n_x
        nzz = self.n_nodes * self.n_z
        return {"u": 0, "mu": nu, "z": nu + nmu, "s": nu + nmu + nzz,
                "end": nu + nmu + nzz + self.n_nodes * self.kp}

    @property
    def n_vars(self):
        return self.offsets["end"]

    def u_idx(self, i):
        o = self.offsets["u"] + i * self.m
        return np.arange(o, o + self.m)

    def mu_idx(self, i):
        o = self.offsets["mu"] + i * self.n_x
        return np.arange(o, o + self.n_x)

    def z_idx(self, i):
        o = self.offsets["z"] + i * self.n_z
        return np.arange(o, o + self.n_z)

    def s_idx(self, i):
        o = self.offsets["s"] + i * self.kp
        return np.arange(o, o + self.kp)

    def pack_iterate(self, it: Iterate) -> np.ndarray:
        return np.concatenate([np.ravel(it.u), np.ravel(it.mu), np.ravel(it.z),
                               np.ravel(pack(it.Sigma))])

    def unpack(self, x: np.ndarray) -> Iterate:
        o = self.offsets
        S, N = self.n_stages, self.n_nodes
        return Iterate(
            u=x[o["u"]:o["mu"]].reshape(S, self.m).copy(),
            mu=x[o["mu"]:o["z"]].reshape(N, self.n_x).copy(),
            z=x[o["z"]:o["s"]].reshape(N, self.n_z).copy(),
            Sigma=unpack(x[o["s"]:o["end"]].reshape(N, self.kp), self.n_x),
        )


@dataclass(frozen=True)
class ConvexSubproblem:
    P: sp.csc_matrix
    q: np.ndarray
    c0: float
    Aeq: sp.csc_matrix
    beq: np.ndarray
    box_idx: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    tr_Q: sp.csc_matrix
    tr_a: np.ndarray
    tr_c: float
    delta: float
    layout: Optional[Layout] = None
    rows: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.q.size

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.c0)

    def trust_lhs(self, x) -> float:
        return float(x @ (self.tr_Q @ x) + self.tr_a @ x + self.tr_c)

    def with_delta(self, delta: float) -> "ConvexSubproblem":
        return replace(self, delta=float(delta))


def build(inst: OCPInstance, coeffs: LTVCoefficients, lin_cost: LinearizedCost,
          ref: Iterate, delta: float, grid: TimeGrid) -> ConvexSubproblem:
    """Convex transcription of the linearized subproblem about ``ref``."""
    if not delta >= 0:
        raise ValueError("trust-region radius must be non-negative")
    return _assemble(inst, coeffs, lin_cost, ref, float(delta), grid)


def _assemble(inst, coeffs, lin_cost, ref, delta, grid):
    N, S, h = grid.n_nodes, grid.n_stages, grid.h
    lay = Layout(N, inst.n_x, inst.n_z, inst.m)
    nx, nz, kp = lay.n_x, lay.n_z, lay.kp
    n = lay.n_vars
    dl = discretize(coeffs, grid)
    tmask = trace_mask(nx)

    # objective
    diag_p = np.zeros(n)
    q = np.zeros(n)
    c0 = 0.0
    for i in range(S):
        diag_p[lay.u_idx(i)] = 2.0 * h * lin_cost.control_weight
        q[lay.mu_idx(i)] += h * lin_cost.grad[i]
        q[lay.s_idx(i)] += h * lin_cost.variance_weight * tmask
        c0 += h * (lin_cost.const[i] - lin_cost.grad[i] @ lin_cost.mu_ref[i])
    P = sp.diags(diag_p, format="csc")

    # equalities
    rr, cc, vv = [], [], []
    beq = []
    rows = {}
    row = 0

    def put(block, r_idx, c_idx, scale=1.0):
        block = np.atleast_2d(block)
        ri, ci = np.meshgrid(r_idx, c_idx, indexing="ij")
        nz_mask = block != 0
        rr.extend(ri[nz_mask]); cc.extend(ci[nz_mask]); vv.extend(scale * block[nz_mask])

    def new_rows(k, name=None):
        nonlocal row
        idx = np.arange(row, row + k)
        row += k
        if name is not None:
            rows.setdefault(name, []).append(idx)
        return idx

    r = new_rows(nx, "init_mu"); put(np.eye(nx), r, lay.mu_idx(0)); beq.extend(inst.x0)
    r = new_rows(nz, "init_z"); put(np.eye(nz), r, lay.z_idx(0)); beq.extend(inst.z0)
    r = new_rows(kp, "init_s"); put(np.eye(kp), r, lay.s_idx(0)); beq.extend(np.zeros(kp))
    for i in range(S):
        r = new_rows(nx, "dyn_mu")
        put(np.eye(nx), r, lay.mu_idx(i + 1))
        put(dl.Phi[i], r, lay.mu_idx(i), -1.0)
        put(dl.Psi[i], r, lay.z_idx(i), -1.0)
        put(dl.Gamma[i], r, lay.u_idx(i), -1.0)
        beq.extend(dl.gamma[i])
        r = new_rows(nz, "dyn_z")
        put(np.eye(nz), r, lay.z_idx(i + 1))
        put(dl.Phi_z[i], r, lay.z_idx(i), -1.0)
        put(dl.Gamma_z[i], r, lay.u_idx(i), -1.0)
        beq.extend(dl.gamma_z[i])
        r = new_rows(kp, "dyn_s")
        put(np.eye(kp), r, lay.s_idx(i + 1))
        put(dl.L[i], r, lay.s_idx(i), -1.0)
        put(dl.K[i], r, lay.z_idx(i), -1.0)
        beq.extend(dl.k[i])
    r = new_rows(nx, "terminal_x"); put(np.eye(nx), r, lay.mu_idx(N - 1)); beq.extend(inst.goal_x)
    r = new_rows(nz, "terminal_z"); put(np.eye(nz), r, lay.z_idx(N - 1)); beq.extend(inst.goal_z)
    Aeq = sp.csc_matrix((vv, (rr, cc)), shape=(row, n))
    rows = {k: np.stack(v) for k, v in rows.items()}

    # control box
    box_idx = np.arange(lay.offsets["u"], lay.offsets["mu"])
    box_lo = np.tile(inst.u_lo, S)
    box_hi = np.tile(inst.u_hi, S)

    # trust region, conservative covariance surrogate
    diag_q = np.zeros(n)
    tr_a = np.zeros(n)
    tr_c = 0.0
    ref_tr = ref.trace_sigma()
    for i in range(S):
        diag_q[lay.mu_idx(i)] = h
        tr_a[lay.mu_idx(i)] = -2.0 * h * ref.mu[i]
        tr_a[lay.s_idx(i)] = 2.0 * h * tmask
        tr_c += h * (ref.mu[i] @ ref.mu[i] + 2.0 * ref_tr[i])

    return ConvexSubproblem(
        P=P, q=q, c0=float(c0), Aeq=Aeq, beq=np.asarray(beq, dtype=float),
        box_idx=box_idx, box_lo=box_lo, box_hi=box_hi,
        tr_Q=sp.diags(diag_q, format="csc"), tr_a=tr_a, tr_c=float(tr_c),
        delta=delta, layout=lay, rows=rows,
    )


def equality_residual(p: ConvexSubproblem, x) -> np.ndarray:
    return p.Aeq @ x - p.beq


def equality_rank(p: ConvexSubproblem, tol: float = 1e-10) -> int:
    """Numerical row rank of the equality matrix (dense SVD; small problems)."""
    s = np.linalg.svd(p.Aeq.toarray(), compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0] if s.size else 0.0)))


def convexity_audit(p: ConvexSubproblem, tol: float = 1e-10) -> dict:
    """Check PSD objective and trust-region curvature, finite affine data."""
    def min_eig(M):
        M = M.toarray() if sp.issparse(M) else np.asarray(M)
        if M.size == 0:
            return 0.0
        return float(np.min(np.linalg.eigvalsh(0.5 * (M + M.T))))

    pe, qe = min_eig(p.P), min_eig(p.tr_Q)
    scale = max(1.0, abs(p.P).max() if p.P.nnz else 1.0)
    checks = {
        "objective_psd": pe >= -tol * scale,
        "trust_region_psd": qe >= -tol * max(1.0, abs(p.tr_Q).max() if p.tr_Q.nnz else 1.0),
        "affine_finite": bool(np.all(np.isfinite(p.Aeq.data)) and np.all(np.isfinite(p.beq))),
        "box_ordered": bool(np.all(p.box_lo <= p.box_hi)),
    }
    return {"passed": all(checks.values()), "min_eig_objective": pe,
            "min_eig_trust_region": qe, **checks}


def dump_qp(p: ConvexSubproblem, path) -> None:
    """Write the program as sparse triplets.

    Sections, each introduced by ``# <name> <rows> <cols> <nnz>`` followed by
    ``i j value`` lines (0-based): ``P``, ``Aeq``, ``trQ``. Vectors follow as
    ``# <name> <len>`` and one ``i value`` line per entry: ``q``, ``beq``,
    ``tra``, ``box_idx`` (index, lo, hi). Scalars: ``c0``, ``trc``, ``delta``.
    """
    def mat(fh, name, M):
        M = sp.coo_matrix(M)
        fh.write(f"# {name} {M.shape[0]} {M.shape[1]} {M.nnz}\n")
        for i, j, v in zip(M.row, M.col, M.data):
            fh.write(f"{i} {j} {v:.17g}\n")

    def vec(fh, name, v):
        fh.write(f"# {name} {len(v)}\n")
        for i, val in enumerate(v):
            fh.write(f"{i} {val:.17g}\n")

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# qcqp n={p.n} m_eq={p.Aeq.shape[0]} n_box={p.box_idx.size}\n")
        mat(fh, "P", p.P)
        mat(fh, "Aeq", p.Aeq)
        mat(fh, "trQ", p.tr_Q)
        vec(fh, "q", p.q)
        vec(fh, "beq", p.beq)
        vec(fh, "tra", p.tr_a)
        fh.write(f"# box_idx {p.box_idx.size}\n")
        for k, lo, hi in zip(p.box_idx, p.box_lo, p.box_hi):
            fh.write(f"{k} {lo:.17g} {hi:.17g}\n")
        fh.write(f"# c0 {p.c0:.17g}\n# trc {p.tr_c:.17g}\n# delta {p.delta:.17g}\n")
