"""Euler-Maruyama validation of controls on the original non-linear SDE.

Every path owns a Philox-4x64-10 stream keyed by ``(seed, path)``; the draw
for node ``i`` is the ``i``-th block of that stream. Results therefore do not
depend on chunking or on the order in which paths are simulated.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .problem import ObstacleSet, OCPInstance, TimeGrid

RNG_ALGORITHM = "philox4x64-10"


@dataclass(frozen=True)
class SamplePathEnsemble:
    x: np.ndarray       # (M, K, n_x) at the recorded nodes
    z: np.ndarray       # (N, n_z), shared by every path
    nodes: np.ndarray   # (K,) recorded node indices
    times: np.ndarray   # (K,)
    seed: int
    path_keys: np.ndarray  # (M, 2) Philox keys
    algorithm: str = RNG_ALGORITHM

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]


def path_generator(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, path], dtype=np.uint64)))


def path_increments(seed: int, paths: Sequence[int], n_stages: int, d: int) -> np.ndarray:
    """Standard normal draws, shape ``(len(paths), n_stages, d)``."""
    out = np.empty((len(paths), n_stages, d))
    for row, path in enumerate(paths):
        out[row] = path_generator(seed, int(path)).standard_normal((n_stages, d))
    return out


def deterministic_rollout(inst: OCPInstance, controls, grid: TimeGrid) -> np.ndarray:
    u = np.asarray(controls, dtype=float)
    z = np.empty((grid.n_nodes, inst.n_z))
    z[0] = inst.z0
    times = grid.times
    for i in range(grid.n_stages):
        z[i + 1] = z[i] + grid.h * np.asarray(inst.drift_z(times[i], u[i], z[i]), float)
    return z


def simulate(inst: OCPInstance, controls, grid: TimeGrid, M: int, seed: int = 0,
             keep_nodes=None, chunk_size: int = 4096, workers: int = 1) -> SamplePathEnsemble:
    """Simulate ``M`` paths; ``z`` is integrated once, ``x`` by Euler-Maruyama."""
    if M < 1:
        raise ValueError("need at least one path")
    u = np.asarray(controls, dtype=float)
    if u.shape != (grid.n_stages, inst.m):
        raise ValueError(f"controls must have shape ({grid.n_stages}, {inst.m}), got {u.shape}")
    S, h = grid.n_stages, grid.h
    times = grid.times
    nodes = np.arange(grid.n_nodes) if keep_nodes is None else np.asarray(keep_nodes, dtype=int)
    z = deterministic_rollout(inst, u, grid)
    if not np.all(np.isfinite(z)):
        bad = int(np.argmax(~np.all(np.isfinite(z), axis=1)))
        raise FloatingPointError(f"non-finite deterministic state at node {bad}")
    sig = np.stack([np.asarray(inst.diffusion(times[i], z[i]), float).reshape(inst.n_x, inst.d)
                    for i in range(S)])
    sqh = np.sqrt(h)
    node_slot = {int(k): j for j, k in enumerate(nodes)}
    X = np.empty((M, nodes.size, inst.n_x))

    def run_chunk(start):
        stop = min(start + chunk_size, M)
        xi = path_increments(seed, range(start, stop), S, inst.d)
        x = np.broadcast_to(np.asarray(inst.x0, float), (stop - start, inst.n_x)).copy()
        if 0 in node_slot:
            X[start:stop, node_slot[0]] = x
        for i in range(S):
            noise = np.sum(xi[:, i, :, None] * sig[i].T[None], axis=1)
            x = x + h * np.asarray(inst.drift_x(times[i], u[i], x, z[i]), float) + sqh * noise
            if not np.all(np.isfinite(x)):
                path = start + int(np.argmax(~np.all(np.isfinite(x), axis=1)))
                raise FloatingPointError(f"non-finite state on path {path} at node {i + 1}")
            if i + 1 in node_slot:
                X[start:stop, node_slot[i + 1]] = x

    starts = range(0, M, chunk_size)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run_chunk, starts))
    else:
        for start in starts:
            run_chunk(start)
    keys = np.stack([np.full(M, seed, dtype=np.uint64), np.arange(M, dtype=np.uint64)], axis=1)
    return SamplePathEnsemble(x=X, z=z, nodes=nodes, times=times[nodes], seed=int(seed),
                              path_keys=keys)


def node_collisions(ens: SamplePathEnsemble, obstacles: ObstacleSet) -> np.ndarray:
    """``(paths, nodes)`` indicator: the recorded node lies strictly inside a
    physical disk (the clearance margin is not part of the obstacle)."""
    hits = np.zeros(ens.x.shape[:2], dtype=bool)
    if obstacles.obstacles:
        r = obstacles.positions(ens.x)
        for ob in obstacles.obstacles:
            hits |= np.sum((r - ob.center) ** 2, axis=-1) < ob.radius ** 2
    return hits


def collision_flags(ens: SamplePathEnsemble, obstacles: ObstacleSet) -> np.ndarray:
    """Per-path flag: some recorded node collides."""
    return node_collisions(ens, obstacles).any(axis=1)


def collision_rate(ens: SamplePathEnsemble, obstacles: ObstacleSet) -> float:
    return float(np.mean(collision_flags(ens, obstacles)))


def empirical_moments(ens: SamplePathEnsemble):
    """Per-node sample mean and unbiased sample covariance."""
    M = ens.n_paths
    if M < 2:
        raise ValueError("sample covariance needs at least two paths")
    # shifted by the first path: identical paths give exactly zero covariance
    shifted = ens.x - ens.x[0]
    offset = shifted.mean(axis=0)
    mean = ens.x[0] + offset
    dev = shifted - offset
    cov = np.einsum("mki,mkj->kij", dev, dev) / (M - 1)
    return mean, cov


def continuity_probe(inst: OCPInstance, u1, u2, grid: TimeGrid, M: int, seed: int = 0):
    """``(int |u1 - u2| ds, E[sup_t |x_u1 - x_u2|^2])`` with common random numbers."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    control_gap = float(grid.h * np.sum(np.linalg.norm(u1 - u2, axis=1)))
    e1 = simulate(inst, u1, grid, M, seed)
    e2 = simulate(inst, u2, grid, M, seed)
    gap = np.max(np.sum((e1.x - e2.x) ** 2, axis=-1), axis=1)
    return control_gap, float(np.mean(gap))


def ensemble_summary(ens: SamplePathEnsemble, obstacles: Optional[ObstacleSet] = None) -> dict:
    out = {"paths": ens.n_paths, "seed": ens.seed, "rng": ens.algorithm}
    if obstacles is not None:
        flags = collision_flags(ens, obstacles)
        out["collision_rate"] = float(np.mean(flags))
        out["collisions"] = int(np.sum(flags))
    return out
