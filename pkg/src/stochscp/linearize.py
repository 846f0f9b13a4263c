"""First-order expansion of drift, diffusion and running cost about a mean iterate."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .problem import OCPInstance, TimeGrid


@dataclass(frozen=True)
class LTVCoefficients:
    """Stage-wise linearization on stages ``i = 0 .. N-2``.

    The linear model is::

        dmu = (A mu + F z + Bmap u + b_off) dt + C(z) dB
        dz  = (D z + Emap u + e_off) dt
        C(z) = C0 + sum_j Cz[..., j] (z_j - z_ref_j)

    ``F`` carries the coupling of the x-drift to the deterministic block.
    """

    A: np.ndarray      # (S, n_x, n_x)
    F: np.ndarray      # (S, n_x, n_z)
    Bmap: np.ndarray   # (S, n_x, m)
    b_off: np.ndarray  # (S, n_x)
    D: np.ndarray      # (S, n_z, n_z)
    Emap: np.ndarray   # (S, n_z, m)
    e_off: np.ndarray  # (S, n_z)
    C0: np.ndarray     # (S, n_x, d)
    Cz: np.ndarray     # (S, n_x, d, n_z)
    z_ref: np.ndarray  # (S, n_z)

    @property
    def n_stages(self) -> int:
        return self.A.shape[0]

    def diffusion(self, i: int, z) -> np.ndarray:
        return self.C0[i] + np.einsum("adj,j->ad", self.Cz[i], np.asarray(z) - self.z_ref[i])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f))) for f in self.__dataclass_fields__)


@dataclass(frozen=True)
class LinearizedCost:
    """Running cost ``r|u|^2 + const_i + grad_i . (mu - mu_ref_i) + w tr Sigma``."""

    const: np.ndarray   # (S,)   L0(t_i, mu_ref_i)
    grad: np.ndarray    # (S, n_x)
    mu_ref: np.ndarray  # (S, n_x)
    control_weight: float
    variance_weight: float


def fd_jacobian(f, x0, step=None):
    """Central-difference Jacobian of ``f`` at ``x0``; output shape ``f.shape + x.shape``."""
    x0 = np.asarray(x0, dtype=float)
    if step is None:
        step = 1e-5 * max(1.0, float(np.linalg.norm(x0)))
    f0 = np.asarray(f(x0), dtype=float)
    jac = np.empty(f0.shape + x0.shape)
    for j in range(x0.size):
        e = np.zeros_like(x0)
        e.flat[j] = step
        jac[..., j] = (np.asarray(f(x0 + e)) - np.asarray(f(x0 - e))) / (2 * step)
    return jac


def _drift_x_jac(inst, t, u, x, z):
    if inst.drift_x_jac is not None:
        jx, jz, ju = inst.drift_x_jac(t, u, x, z)
        return np.asarray(jx, float), np.asarray(jz, float), np.asarray(ju, float)
    step = 1e-5 * max(1.0, float(np.linalg.norm(np.concatenate([u, x, z]))))
    jx = fd_jacobian(lambda v: inst.drift_x(t, u, v, z), x, step)
    jz = fd_jacobian(lambda v: inst.drift_x(t, u, x, v), z, step)
    ju = fd_jacobian(lambda v: inst.drift_x(t, v, x, z), u, step)
    return jx, jz, ju


def _drift_z_jac(inst, t, u, z):
    if inst.drift_z_jac is not None:
        jz, ju = inst.drift_z_jac(t, u, z)
        return np.asarray(jz, float), np.asarray(ju, float)
    step = 1e-5 * max(1.0, float(np.linalg.norm(np.concatenate([u, z]))))
    return (fd_jacobian(lambda v: inst.drift_z(t, u, v), z, step),
            fd_jacobian(lambda v: inst.drift_z(t, v, z), u, step))


def _diffusion_jac(inst, t, z):
    if inst.diffusion_jac is not None:
        return np.asarray(inst.diffusion_jac(t, z), float)
    return fd_jacobian(lambda v: inst.diffusion(t, v), z)


def _penalty_grad(inst, t, x):
    if inst.state_penalty_grad is not None:
        return np.asarray(inst.state_penalty_grad(t, x), float)
    return fd_jacobian(lambda v: inst.state_penalty(t, v), x)


def linearize(inst: OCPInstance, ref, grid: TimeGrid):
    """Expand the problem about ``ref`` (an :class:`~stochscp.moments.Iterate`).

    Returns ``(LTVCoefficients, LinearizedCost)``. The expansion point is the
    reference mean, never individual sample paths.
    """
    S = grid.n_stages
    u_ref = np.asarray(ref.u, dtype=float)
    mu_ref = np.asarray(ref.mu, dtype=float)
    z_ref = np.asarray(ref.z, dtype=float)
    for label, arr in (("u", u_ref), ("mu", mu_ref), ("z", z_ref)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"reference {label} contains non-finite values")
    nx, nz, m, d = inst.n_x, inst.n_z, inst.m, inst.d
    out = {
        "A": np.empty((S, nx, nx)), "F": np.empty((S, nx, nz)), "Bmap": np.empty((S, nx, m)),
        "b_off": np.empty((S, nx)), "D": np.empty((S, nz, nz)), "Emap": np.empty((S, nz, m)),
        "e_off": np.empty((S, nz)), "C0": np.empty((S, nx, d)), "Cz": np.empty((S, nx, d, nz)),
    }
    const = np.empty(S)
    grad = np.empty((S, nx))
    times = grid.times
    for i in range(S):
        t, u, x, z = times[i], u_ref[i], mu_ref[i], z_ref[i]
        jx, jz, ju = _drift_x_jac(inst, t, u, x, z)
        fx = np.asarray(inst.drift_x(t, u, x, z), float)
        out["A"][i], out["F"][i], out["Bmap"][i] = jx, jz, ju
        out["b_off"][i] = fx - jx @ x - jz @ z - ju @ u
        dz, du = _drift_z_jac(inst, t, u, z)
        fz = np.asarray(inst.drift_z(t, u, z), float)
        out["D"][i], out["Emap"][i] = dz, du
        out["e_off"][i] = fz - dz @ z - du @ u
        out["C0"][i] = np.asarray(inst.diffusion(t, z), float).reshape(nx, d)
        out["Cz"][i] = _diffusion_jac(inst, t, z).reshape(nx, d, nz)
        const[i] = float(inst.state_penalty(t, x))
        grad[i] = _penalty_grad(inst, t, x)
    coeffs = LTVCoefficients(z_ref=z_ref[:S].copy(), **out)
    if not coeffs.all_finite():
        raise ValueError("linearization produced non-finite coefficients")
    cost = LinearizedCost(const=const, grad=grad, mu_ref=mu_ref[:S].copy(),
                          control_weight=inst.control_weight,
                          variance_weight=inst.variance_weight)
    return coeffs, cost


def check_jacobians(inst: OCPInstance, point, step: float = 1e-5) -> float:
    """Worst relative discrepancy between the instance's Jacobians and central
    differences at ``point = (t, u, x, z)``.

    The per-block error is ``max|J - J_fd| / max(1, max|J_fd|)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    t, u, x, z = (point[0],) + tuple(np.asarray(p, dtype=float) for p in point[1:])
    jx, jz, ju = _drift_x_jac(inst, t, u, x, z)
    djz, dju = _drift_z_jac(inst, t, u, z)
    cz = _diffusion_jac(inst, t, z).reshape(inst.n_x, inst.d, inst.n_z)
    pg = _penalty_grad(inst, t, x)
    pairs = [
        (jx, fd_jacobian(lambda v: inst.drift_x(t, u, v, z), x, step)),
        (jz, fd_jacobian(lambda v: inst.drift_x(t, u, x, v), z, step)),
        (ju, fd_jacobian(lambda v: inst.drift_x(t, v, x, z), u, step)),
        (djz, fd_jacobian(lambda v: inst.drift_z(t, u, v), z, step)),
        (dju, fd_jacobian(lambda v: inst.drift_z(t, v, z), u, step)),
        (cz, fd_jacobian(lambda v: np.asarray(inst.diffusion(t, v)).reshape(inst.n_x, inst.d), z, step)),
        (pg, fd_jacobian(lambda v: inst.state_penalty(t, v), x, step)),
    ]
    worst = 0.0
    for analytic, numeric in pairs:
        err = np.max(np.abs(analytic - numeric), initial=0.0)
        worst = max(worst, err / max(1.0, np.max(np.abs(numeric), initial=0.0)))
    return float(worst)


def linearized_instance(inst: OCPInstance, coeffs: LTVCoefficients, grid: TimeGrid) -> OCPInstance:
    """The linear SDE defined by ``coeffs`` as a stand-alone instance.

    Evaluators look up the stage from ``t`` on ``grid``; useful for checking
    propagated moments against Euler-Maruyama ensembles.
    """
    h = grid.h
    S = coeffs.n_stages

    def stage(t):
        return min(int(round(t / h)), S - 1)

    def drift_x(t, u, x, z):
        i = stage(t)
        return (np.asarray(x) @ coeffs.A[i].T + np.asarray(z) @ coeffs.F[i].T
                + np.asarray(u) @ coeffs.Bmap[i].T + coeffs.b_off[i])

    def drift_z(t, u, z):
        i = stage(t)
        return np.asarray(z) @ coeffs.D[i].T + np.asarray(u) @ coeffs.Emap[i].T + coeffs.e_off[i]

    return replace(
        inst,
        drift_x=drift_x,
        drift_z=drift_z,
        diffusion=lambda t, z: coeffs.diffusion(stage(t), z),
        drift_x_jac=lambda t, u, x, z: (coeffs.A[stage(t)], coeffs.F[stage(t)], coeffs.Bmap[stage(t)]),
        drift_z_jac=lambda t, u, z: (coeffs.D[stage(t)], coeffs.Emap[stage(t)]),
        diffusion_jac=lambda t, z: coeffs.Cz[stage(t)],
        name=inst.name + "-linearized",
    )
