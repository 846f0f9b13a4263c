"""Mean/covariance dynamics of the linearized SDE under forward Euler."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .linearize import LTVCoefficients
from .problem import TimeGrid


@dataclass(frozen=True)
class Iterate:
    """One SCP iterate on a time grid.

    ``u`` has one row per stage (``N - 1``); ``mu``, ``z`` and ``Sigma`` have
    one entry per node.
    """

    u: np.ndarray      # (N-1, m)
    mu: np.ndarray     # (N, n_x)
    z: np.ndarray      # (N, n_z)
    Sigma: np.ndarray  # (N, n_x, n_x)

    @property
    def n_nodes(self) -> int:
        return self.mu.shape[0]

    def symmetry_error(self) -> float:
        return float(np.max(np.abs(self.Sigma - np.swapaxes(self.Sigma, 1, 2)), initial=0.0))

    def min_eigenvalue(self) -> float:
        sym = 0.5 * (self.Sigma + np.swapaxes(self.Sigma, 1, 2))
        return float(np.min(np.linalg.eigvalsh(sym)))

    def trace_sigma(self) -> np.ndarray:
        return np.trace(self.Sigma, axis1=1, axis2=2)


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


@lru_cache(maxsize=None)
def _triu(n: int):
    return np.triu_indices(n)


def packed_size(n: int) -> int:
    return n * (n + 1) // 2


def pack(M: np.ndarray) -> np.ndarray:
    """Upper triangle (row-major) of a symmetric matrix or stack of them."""
    r, c = _triu(M.shape[-1])
    return M[..., r, c]


def unpack(v: np.ndarray, n: int) -> np.ndarray:
    r, c = _triu(n)
    out = np.zeros(v.shape[:-1] + (n, n))
    out[..., r, c] = v
    out[..., c, r] = v
    return out


def trace_mask(n: int) -> np.ndarray:
    """Packed-coordinate indicator of diagonal entries."""
    r, c = _triu(n)
    return (r == c).astype(float)


def lyapunov_packed(A: np.ndarray) -> np.ndarray:
    """Matrix of ``S -> A S + S A^T`` acting on packed symmetric ``S``."""
    n = A.shape[0]
    k = packed_size(n)
    out = np.empty((k, k))
    basis = np.eye(k)
    for j in range(k):
        S = unpack(basis[j], n)
        out[:, j] = pack(A @ S + S @ A.T)
    return out


def propagate(coeffs: LTVCoefficients, controls, x0, z0, grid: TimeGrid) -> Iterate:
    """Forward-Euler rollout of mean, deterministic block and covariance.

    The covariance source term uses the frozen factor ``C(z_ref)`` times
    ``C(z)^T``, symmetrized. ``Sigma_0 = 0``.
    """
    u = np.asarray(controls, dtype=float)
    S = grid.n_stages
    if u.shape[0] != S:
        raise ValueError(f"expected {S} control stages, got {u.shape[0]}")
    h = grid.h
    nx, nz = coeffs.A.shape[1], coeffs.D.shape[1]
    mu = np.empty((S + 1, nx))
    z = np.empty((S + 1, nz))
    Sig = np.empty((S + 1, nx, nx))
    mu[0], z[0], Sig[0] = x0, z0, 0.0
    for i in range(S):
        A = coeffs.A[i]
        mu[i + 1] = mu[i] + h * (A @ mu[i] + coeffs.F[i] @ z[i] + coeffs.Bmap[i] @ u[i] + coeffs.b_off[i])
        z[i + 1] = z[i] + h * (coeffs.D[i] @ z[i] + coeffs.Emap[i] @ u[i] + coeffs.e_off[i])
        src = sym(coeffs.C0[i] @ coeffs.diffusion(i, z[i]).T)
        Sig[i + 1] = Sig[i] + h * (A @ Sig[i] + Sig[i] @ A.T + src)
        if not (np.all(np.isfinite(mu[i + 1])) and np.all(np.isfinite(z[i + 1]))
                and np.all(np.isfinite(Sig[i + 1]))):
            raise FloatingPointError(f"non-finite moment propagation at node {i + 1}")
    return Iterate(u=u.copy(), mu=mu, z=z, Sigma=Sig)


def psd_clipped(Sigma: np.ndarray, floor: float = -1e-10) -> np.ndarray:
    """Diagnostic copy with eigenvalues below ``floor`` raised to zero."""
    w, V = np.linalg.eigh(sym(Sigma))
    w = np.where(w < floor, 0.0, w)
    return (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)


@dataclass(frozen=True)
class DiscreteLTV:
    """Matrix form of the forward-Euler step.

    ``mu+ = Phi mu + Psi z + Gamma u + gamma``,
    ``z+ = Phi_z z + Gamma_z u + gamma_z``,
    ``s+ = L s + K z + k`` for packed covariance ``s``.
    """

    Phi: np.ndarray
    Psi: np.ndarray
    Gamma: np.ndarray
    gamma: np.ndarray
    Phi_z: np.ndarray
    Gamma_z: np.ndarray
    gamma_z: np.ndarray
    L: np.ndarray
    K: np.ndarray
    k: np.ndarray

    def rollout(self, controls, x0, z0) -> Iterate:
        u = np.asarray(controls, dtype=float)
        S = self.Phi.shape[0]
        nx, nz = self.Phi.shape[1], self.Phi_z.shape[1]
        mu = np.empty((S + 1, nx))
        z = np.empty((S + 1, nz))
        s = np.empty((S + 1, packed_size(nx)))
        mu[0], z[0], s[0] = x0, z0, 0.0
        for i in range(S):
            mu[i + 1] = self.Phi[i] @ mu[i] + self.Psi[i] @ z[i] + self.Gamma[i] @ u[i] + self.gamma[i]
            z[i + 1] = self.Phi_z[i] @ z[i] + self.Gamma_z[i] @ u[i] + self.gamma_z[i]
            s[i + 1] = self.L[i] @ s[i] + self.K[i] @ z[i] + self.k[i]
        return Iterate(u=u.copy(), mu=mu, z=z, Sigma=unpack(s, nx))


def discretize(coeffs: LTVCoefficients, grid: TimeGrid) -> DiscreteLTV:
    h = grid.h
    S, nx = coeffs.A.shape[:2]
    nz = coeffs.D.shape[1]
    kp = packed_size(nx)
    Lm = np.empty((S, kp, kp))
    Km = np.empty((S, kp, nz))
    kv = np.empty((S, kp))
    eye_p = np.eye(kp)
    for i in range(S):
        Lm[i] = eye_p + h * lyapunov_packed(coeffs.A[i])
        C0 = coeffs.C0[i]
        for j in range(nz):
            Km[i, :, j] = h * pack(sym(C0 @ coeffs.Cz[i, :, :, j].T))
        kv[i] = h * pack(sym(C0 @ C0.T)) - Km[i] @ coeffs.z_ref[i]
    return DiscreteLTV(
        Phi=np.eye(nx) + h * coeffs.A,
        Psi=h * coeffs.F,
        Gamma=h * coeffs.Bmap,
        gamma=h * coeffs.b_off,
        Phi_z=np.eye(nz) + h * coeffs.D,
        Gamma_z=h * coeffs.Emap,
        gamma_z=h * coeffs.e_off,
        L=Lm, K=Km, k=kv,
    )


def difference_covariance(coeffs_a: LTVCoefficients, it_a: Iterate,
                          coeffs_b: LTVCoefficients, it_b: Iterate, grid: TimeGrid) -> np.ndarray:
    """Covariance of ``x_a - x_b`` for two linear SDEs driven by one Brownian
    motion, both started deterministically.

    The stacked pair is propagated with its full source ``C C^T`` so the joint
    covariance stays consistent; the result is ``S_aa + S_bb - S_ab - S_ba``.
    """
    h = grid.h
    S = grid.n_stages
    nx = it_a.mu.shape[1]
    J = np.zeros((2 * nx, 2 * nx))
    out = np.zeros((S + 1, nx, nx))
    At = np.zeros((2 * nx, 2 * nx))
    for i in range(S):
        At[:nx, :nx] = coeffs_a.A[i]
        At[nx:, nx:] = coeffs_b.A[i]
        Ct = np.vstack([coeffs_a.diffusion(i, it_a.z[i]), coeffs_b.diffusion(i, it_b.z[i])])
        J = J + h * (At @ J + J @ At.T + Ct @ Ct.T)
        X = J[:nx, nx:]
        out[i + 1] = sym(J[:nx, :nx] + J[nx:, nx:] - X - X.T)
    return out
