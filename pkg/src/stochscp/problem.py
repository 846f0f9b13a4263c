"""Stochastic optimal control problem data and the uncertain-car benchmark.

The state is split into a stochastic block ``x`` and a deterministic block
``z``. Only ``x`` receives noise, and the diffusion depends on ``(t, z)``
alone, so ``z`` evolves as an ordinary differential equation.

All evaluators must broadcast over leading axes of ``x`` (shape ``(..., n_x)``)
so that Monte Carlo ensembles can be stepped in one call.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

PENALTY_SIGNS = ("as_printed", "repulsive")


class ConfigError(ValueError):
    """Malformed or invalid benchmark configuration."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform forward-Euler grid on ``[0, horizon]`` with ``n_nodes`` nodes."""

    n_nodes: int
    horizon: float

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("a time grid needs at least two nodes")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def h(self) -> float:
        return self.horizon / (self.n_nodes - 1)

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.n_nodes)

    @property
    def n_stages(self) -> int:
        return self.n_nodes - 1


@dataclass(frozen=True)
class Obstacle:
    cx: float
    cy: float
    radius: float

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])


@dataclass(frozen=True)
class ObstacleSet:
    """Disk obstacles penalized through ``weight * c_o``.

    ``sign`` selects between the potential exactly as printed (negative inside
    the inflated disk) and its repulsive mirror image.
    """

    obstacles: tuple = ()
    clearance: float = 0.1
    weight: float = 500.0
    position_index: tuple = (0, 1)
    sign: str = "repulsive"

    def __post_init__(self):
        for ob in self.obstacles:
            if not ob.radius > 0:
                raise ValueError(f"obstacle radius must be positive, got {ob.radius}")
        if self.clearance < 0:
            raise ValueError("clearance must be non-negative")
        if self.weight < 0:
            raise ValueError("penalty weight must be non-negative")
        if self.sign not in PENALTY_SIGNS:
            raise ValueError(f"penalty sign must be one of {PENALTY_SIGNS}")

    def __len__(self):
        return len(self.obstacles)

    def positions(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x[..., list(self.position_index)]

    def cost(self, x: np.ndarray) -> np.ndarray:
        """Weighted, signed penalty ``weight * (+/-) c_o`` at state(s) ``x``."""
        if not self.obstacles:
            return np.zeros(np.shape(x)[:-1])
        c = eval_obstacle_potential(self, self.positions(x))
        s = 1.0 if self.sign == "as_printed" else -1.0
        return self.weight * s * c

    def cost_grad(self, x: np.ndarray) -> np.ndarray:
        """Gradient of :meth:`cost` with respect to the full x-block."""
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        if not self.obstacles:
            return g
        r = self.positions(x)
        gr = np.zeros_like(r)
        for ob in self.obstacles:
            d = r - ob.center
            inside = np.sum(d * d, axis=-1) < (ob.radius + self.clearance) ** 2
            gr = gr + 2.0 * d * inside[..., None]
        s = 1.0 if self.sign == "as_printed" else -1.0
        g[..., list(self.position_index)] = self.weight * s * gr
        return g


def eval_obstacle_potential(obs: ObstacleSet, r) -> np.ndarray:
    """Sum over obstacles of ``|r - r_o|^2 - (delta_o + eps)^2`` inside the
    inflated disk, zero outside. Broadcasts over leading axes of ``r``."""
    r = np.asarray(r, dtype=float)
    total = np.zeros(r.shape[:-1])
    for ob in obs.obstacles:
        d2 = np.sum((r - ob.center) ** 2, axis=-1)
        rad2 = (ob.radius + obs.clearance) ** 2
        total = total + np.where(d2 < rad2, d2 - rad2, 0.0)
    return total


@dataclass(frozen=True)
class OCPInstance:
    """Fixed-horizon stochastic OCP with control-affine drift.

    ``control_weight`` ``r`` fixes the control cost to ``G(u) = r |u|^2``.
    The optional ``*_jac`` callables supply analytic derivatives; when absent
    the linearizer falls back to central differences.
    """

    n_x: int
    n_z: int
    m: int
    d: int
    horizon: float
    drift_x: Callable
    drift_z: Callable
    diffusion: Callable
    state_penalty: Callable
    u_lo: np.ndarray
    u_hi: np.ndarray
    x0: np.ndarray
    z0: np.ndarray
    goal_x: np.ndarray
    goal_z: np.ndarray
    obstacles: ObstacleSet = field(default_factory=ObstacleSet)
    variance_weight: float = 1.0
    control_weight: float = 1.0
    drift_x_jac: Optional[Callable] = None
    drift_z_jac: Optional[Callable] = None
    diffusion_jac: Optional[Callable] = None
    state_penalty_grad: Optional[Callable] = None
    initial_guess: Optional[Callable] = None
    name: str = "ocp"

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        for label in ("n_x", "n_z", "m", "d"):
            if getattr(self, label) < 1:
                raise ValueError(f"{label} must be at least 1")
        for label, size in (("u_lo", self.m), ("u_hi", self.m), ("x0", self.n_x),
                            ("z0", self.n_z), ("goal_x", self.n_x), ("goal_z", self.n_z)):
            arr = np.array(getattr(self, label), dtype=float)
            if arr.shape != (size,):
                raise ValueError(f"{label} must have shape ({size},), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, label, arr)
        if not np.all(self.u_lo < self.u_hi):
            raise ValueError("control bounds need u_lo < u_hi componentwise")
        if not self.control_weight > 0:
            raise ValueError("control_weight must be positive")

    def control_cost(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.control_weight * np.sum(u * u, axis=-1)

    def grid(self, n_nodes: int) -> TimeGrid:
        return TimeGrid(n_nodes, self.horizon)


def eval_drift(inst: OCPInstance, t, u, x, z):
    """Evaluate both drift blocks; returns ``(dx_rate, dz_rate)``."""
    u = np.asarray(u, dtype=float)
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if u.shape[-1] != inst.m or x.shape[-1] != inst.n_x or z.shape[-1] != inst.n_z:
        raise ValueError(
            f"dimension mismatch: got u{u.shape}, x{x.shape}, z{z.shape} for "
            f"(m={inst.m}, n_x={inst.n_x}, n_z={inst.n_z})")
    return np.asarray(inst.drift_x(t, u, x, z)), np.asarray(inst.drift_z(t, u, z))


# ---------------------------------------------------------------- benchmark

@dataclass(frozen=True)
class BenchmarkConfig:
    alpha2: float = 0.1
    beta2: float = 0.01
    lam: float = 500.0
    clearance: float = 0.1
    obstacles: tuple = ()
    goal: tuple = (2.2, 3.0, 0.0, 0.0, 0.0)
    x0: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    horizon: float = 5.0
    N: int = 41
    control_bounds: tuple = (-2.0, 2.0)
    penalty_sign: str = "repulsive"
    variance_weight: float = 1.0
    rng: str = "philox4x64-10"


_CONFIG_KEYS = {
    "alpha2", "beta2", "lambda", "clearance", "obstacles", "goal", "x0",
    "horizon", "N", "control_bounds", "penalty_sign", "variance_weight", "rng",
}


def default_config_path() -> Path:
    return Path(str(resources.files("stochscp") / "data" / "car_benchmark.json"))


def _key_line(text: str, key: str) -> Optional[int]:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_config(text: str) -> BenchmarkConfig:
    """Parse and validate a benchmark config JSON document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno) from None
    if not isinstance(raw, dict):
        raise ConfigError("top-level value must be an object", 1)
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", _key_line(text, unknown[0]))

    def num(key, default):
        val = raw.get(key, default)
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{key!r} must be a number", _key_line(text, key))
        return float(val)

    def vec(key, default, size):
        val = raw.get(key, default)
        if (not isinstance(val, (list, tuple)) or len(val) != size
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val)):
            raise ConfigError(f"{key!r} must be a list of {size} numbers", _key_line(text, key))
        return tuple(float(v) for v in val)

    d = BenchmarkConfig()
    obstacles = []
    for i, ob in enumerate(raw.get("obstacles", [])):
        if not isinstance(ob, dict) or set(ob) != {"cx", "cy", "radius"}:
            raise ConfigError(f"obstacle {i} needs exactly keys cx, cy, radius",
                              _key_line(text, "obstacles"))
        if not all(isinstance(ob[k], (int, float)) for k in ob):
            raise ConfigError(f"obstacle {i} entries must be numbers", _key_line(text, "obstacles"))
        if not ob["radius"] > 0:
            raise ConfigError(f"obstacle {i} radius must be positive", _key_line(text, "obstacles"))
        obstacles.append(Obstacle(float(ob["cx"]), float(ob["cy"]), float(ob["radius"])))

    n_nodes = raw.get("N", d.N)
    if isinstance(n_nodes, bool) or not isinstance(n_nodes, int) or n_nodes < 2:
        raise ConfigError("'N' must be an integer >= 2", _key_line(text, "N"))
    cfg = BenchmarkConfig(
        alpha2=num("alpha2", d.alpha2),
        beta2=num("beta2", d.beta2),
        lam=num("lambda", d.lam),
        clearance=num("clearance", d.clearance),
        obstacles=tuple(obstacles),
        goal=vec("goal", d.goal, 5),
        x0=vec("x0", d.x0, 5),
        horizon=num("horizon", d.horizon),
        N=n_nodes,
        control_bounds=vec("control_bounds", d.control_bounds, 2),
        penalty_sign=str(raw.get("penalty_sign", d.penalty_sign)),
        variance_weight=num("variance_weight", d.variance_weight),
        rng=str(raw.get("rng", d.rng)),
    )
    checks = [
        (cfg.horizon > 0, "horizon", "'horizon' must be positive"),
        (cfg.clearance >= 0, "clearance", "'clearance' must be non-negative"),
        (cfg.lam >= 0, "lambda", "'lambda' must be non-negative"),
        (cfg.control_bounds[0] < cfg.control_bounds[1], "control_bounds",
         "'control_bounds' needs lower < upper"),
        (cfg.penalty_sign in PENALTY_SIGNS, "penalty_sign",
         f"'penalty_sign' must be one of {PENALTY_SIGNS}"),
        (cfg.rng == "philox4x64-10", "rng", "only 'philox4x64-10' is supported"),
    ]
    for ok, key, msg in checks:
        if not ok:
            raise ConfigError(msg, _key_line(text, key))
    return cfg


def load_config(path) -> BenchmarkConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def config_to_dict(cfg: BenchmarkConfig) -> dict:
    return {
        "alpha2": cfg.alpha2,
        "beta2": cfg.beta2,
        "lambda": cfg.lam,
        "clearance": cfg.clearance,
        "obstacles": [{"cx": o.cx, "cy": o.cy, "radius": o.radius} for o in cfg.obstacles],
        "goal": list(cfg.goal),
        "x0": list(cfg.x0),
        "horizon": cfg.horizon,
        "N": cfg.N,
        "control_bounds": list(cfg.control_bounds),
        "penalty_sign": cfg.penalty_sign,
        "variance_weight": cfg.variance_weight,
        "rng": cfg.rng,
    }


def default_config() -> BenchmarkConfig:
    return load_config(default_config_path())


def build_car_benchmark(config: Optional[BenchmarkConfig] = None) -> OCPInstance:
    """Uncertain car: x = (r_x, r_y, theta), z = (v, omega), u = (a_v, a_omega).

    Slip noise scales with ``omega * v``; rows of the diffusion for ``z`` are
    zero and therefore dropped, leaving a 3x3 diagonal over the x-block.
    """
    cfg = default_config() if config is None else config
    if not cfg.horizon > 0:
        raise ValueError("horizon must be positive")
    a2, b2 = cfg.alpha2, cfg.beta2
    noise_scale = np.array([a2, a2, b2])

    def drift_x(t, u, x, z):
        x = np.asarray(x, dtype=float)
        v, w = z[..., 0], z[..., 1]
        th = x[..., 2]
        v = np.broadcast_to(v, th.shape)
        w = np.broadcast_to(w, th.shape)
        return np.stack([v * np.cos(th), v * np.sin(th), w], axis=-1)

    def drift_x_jac(t, u, x, z):
        th = x[2]
        v = z[0]
        jx = np.zeros((3, 3))
        jx[0, 2] = -v * np.sin(th)
        jx[1, 2] = v * np.cos(th)
        jz = np.array([[np.cos(th), 0.0], [np.sin(th), 0.0], [0.0, 1.0]])
        return jx, jz, np.zeros((3, 2))

    def drift_z(t, u, z):
        return np.array(u, dtype=float)

    def drift_z_jac(t, u, z):
        return np.zeros((2, 2)), np.eye(2)

    def diffusion(t, z):
        return np.diag(noise_scale * z[0] * z[1])

    def diffusion_jac(t, z):
        jac = np.zeros((3, 3, 2))
        jac[:, :, 0] = np.diag(noise_scale * z[1])
        jac[:, :, 1] = np.diag(noise_scale * z[0])
        return jac

    x0 = np.array(cfg.x0[:3])
    goal = np.array(cfg.goal[:3])

    def straight_line(grid):
        # positions on the segment, heading along it at constant speed so the
        # first linearization can steer both position coordinates
        from .moments import Iterate

        s = np.linspace(0.0, 1.0, grid.n_nodes)[:, None]
        mu = (1 - s) * x0 + s * goal
        z = (1 - s) * np.array(cfg.x0[3:]) + s * np.array(cfg.goal[3:])
        seg = goal[:2] - x0[:2]
        length = float(np.hypot(*seg))
        if length > 0 and grid.n_nodes > 2:
            mu[1:-1, 2] = np.arctan2(seg[1], seg[0])
            z[1:-1, 0] = length / grid.horizon
        return Iterate(u=np.zeros((grid.n_stages, 2)), mu=mu, z=z,
                       Sigma=np.zeros((grid.n_nodes, 3, 3)))

    obs = ObstacleSet(tuple(cfg.obstacles), clearance=cfg.clearance, weight=cfg.lam,
                      position_index=(0, 1), sign=cfg.penalty_sign)
    lo, hi = cfg.control_bounds
    return OCPInstance(
        n_x=3, n_z=2, m=2, d=3,
        horizon=cfg.horizon,
        drift_x=drift_x,
        drift_z=drift_z,
        diffusion=diffusion,
        state_penalty=lambda t, x: obs.cost(x),
        u_lo=np.full(2, lo),
        u_hi=np.full(2, hi),
        x0=x0,
        z0=np.array(cfg.x0[3:]),
        goal_x=goal,
        goal_z=np.array(cfg.goal[3:]),
        obstacles=obs,
        variance_weight=cfg.variance_weight,
        drift_x_jac=drift_x_jac,
        drift_z_jac=drift_z_jac,
        diffusion_jac=diffusion_jac,
        state_penalty_grad=lambda t, x: obs.cost_grad(x),
        initial_guess=straight_line,
        name="car",
    )


def make_linear_instance(A, F, B, D, E, C, *, x0, z0, goal_x, goal_z,
                         b=None, e=None, u_bound: float = 1e3,
                         horizon: float = 1.0, variance_weight: float = 1.0,
                         name: str = "linear") -> OCPInstance:
    """Linear-Gaussian instance ``dx = (Ax + Fz + Bu + b) dt + C dB``,
    ``dz = (Dz + Eu + e) dt`` with constant diffusion and no state penalty."""
    A, F, B, D, E, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, F, B, D, E, C))
    n_x, n_z, m, d = A.shape[0], D.shape[0], B.shape[1], C.shape[1]
    b = np.zeros(n_x) if b is None else np.asarray(b, dtype=float)
    e = np.zeros(n_z) if e is None else np.asarray(e, dtype=float)

    def drift_x(t, u, x, z):
        return np.asarray(x) @ A.T + np.asarray(z) @ F.T + np.asarray(u) @ B.T + b

    def drift_z(t, u, z):
        return np.asarray(z) @ D.T + np.asarray(u) @ E.T + e

    return OCPInstance(
        n_x=n_x, n_z=n_z, m=m, d=d, horizon=horizon,
        drift_x=drift_x, drift_z=drift_z,
        diffusion=lambda t, z: C,
        state_penalty=lambda t, x: np.zeros(np.shape(x)[:-1]),
        u_lo=np.full(m, -u_bound), u_hi=np.full(m, u_bound),
        x0=x0, z0=z0, goal_x=goal_x, goal_z=goal_z,
        variance_weight=variance_weight,
        drift_x_jac=lambda t, u, x, z: (A.copy(), F.copy(), B.copy()),
        drift_z_jac=lambda t, u, z: (D.copy(), E.copy()),
        diffusion_jac=lambda t, z: np.zeros((n_x, d, n_z)),
        state_penalty_grad=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        name=name,
    )


def with_obstacles(inst: OCPInstance, obstacles: Sequence[Obstacle]) -> OCPInstance:
    """Copy of ``inst`` with a different obstacle list (same penalty settings)."""
    obs = replace(inst.obstacles, obstacles=tuple(obstacles))
    return replace(inst, obstacles=obs, state_penalty=lambda t, x: obs.cost(x),
                   state_penalty_grad=lambda t, x: obs.cost_grad(x))
