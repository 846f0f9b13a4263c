"""Report figures for the command-line runs (matplotlib, headless backend)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _draw_obstacles(ax, obstacles, clearance=True):
    from matplotlib.patches import Circle

    for ob in obstacles.obstacles:
        ax.add_patch(Circle(ob.center, ob.radius, color="0.35", alpha=0.8, lw=0))
        if clearance and obstacles.clearance > 0:
            ax.add_patch(Circle(ob.center, ob.radius + obstacles.clearance, fill=False,
                                ls="--", lw=0.8, color="0.35"))


def plot_iterations(history, inst, grid, out_dir) -> list:
    """Per-iteration mean paths, velocities and controls. Returns written paths."""
    plt = _pyplot()
    out = Path(out_dir)
    written = []
    cmap = plt.get_cmap("viridis")
    colors = [cmap(v) for v in np.linspace(0.0, 1.0, max(len(history), 2))]
    t = grid.times
    ix, iy = inst.obstacles.position_index

    fig, ax = plt.subplots(figsize=(5, 5))
    _draw_obstacles(ax, inst.obstacles)
    for k, it in enumerate(history):
        ax.plot(it.mu[:, ix], it.mu[:, iy], color=colors[k], lw=2.0 if k == len(history) - 1 else 0.8,
                label="initial guess" if k == 0 else (f"iterate {k}" if k == len(history) - 1 else None))
    ax.plot(*inst.x0[[ix, iy]], "ko")
    ax.plot(*inst.goal_x[[ix, iy]], "k*", ms=10)
    ax.set_aspect("equal")
    ax.set_xlabel("r_x")
    ax.set_ylabel("r_y")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    written.append(out / "trajectories.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, axes = plt.subplots(inst.n_z, 1, figsize=(6, 2.2 * inst.n_z), sharex=True, squeeze=False)
    for j, ax in enumerate(axes[:, 0]):
        for k, it in enumerate(history[1:], start=1):
            ax.plot(t, it.z[:, j], color=colors[k], lw=1.8 if k == len(history) - 1 else 0.7)
        ax.set_ylabel(f"z[{j}]")
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    written.append(out / "velocities.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, axes = plt.subplots(inst.m, 1, figsize=(6, 2.2 * inst.m), sharex=True, squeeze=False)
    for j, ax in enumerate(axes[:, 0]):
        for k, it in enumerate(history[1:], start=1):
            ax.step(t[:-1], it.u[:, j], where="post", color=colors[k],
                    lw=1.8 if k == len(history) - 1 else 0.7)
        ax.axhline(inst.u_lo[j], color="0.5", ls=":")
        ax.axhline(inst.u_hi[j], color="0.5", ls=":")
        ax.set_ylabel(f"u[{j}]")
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    written.append(out / "controls.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)
    return written


def plot_sample_paths(ens, inst, out_dir, max_paths: int = 200, flags=None) -> list:
    """Sample paths over the obstacle field; colliding paths drawn in red."""
    plt = _pyplot()
    ix, iy = inst.obstacles.position_index
    fig, ax = plt.subplots(figsize=(5, 5))
    _draw_obstacles(ax, inst.obstacles, clearance=False)
    shown = min(max_paths, ens.n_paths)
    for j in range(shown):
        hit = flags is not None and bool(flags[j])
        ax.plot(ens.x[j, :, ix], ens.x[j, :, iy], lw=0.5,
                color="tab:red" if hit else "tab:blue", alpha=0.6 if hit else 0.3)
    mean = ens.x.mean(axis=0)
    ax.plot(mean[:, ix], mean[:, iy], "k-", lw=1.5, label="sample mean")
    ax.set_aspect("equal")
    ax.set_xlabel("r_x")
    ax.set_ylabel("r_y")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    path = Path(out_dir) / "sample_paths.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
