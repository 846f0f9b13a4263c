"""Command-line entry point: ``stochscp solve | simulate | check``.

Exit codes: 0 success, 1 bad input (config, controls file), 2 no
convergence, 3 failed audit.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .problem import (ConfigError, build_car_benchmark, config_to_dict, default_config_path,
                      load_config)
from .scp import SCPOptions, initial_guess, run
from .solver import SolverOptions

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2
EXIT_AUDIT = 3

log = logging.getLogger("stochscp")


def _num(v) -> str:
    return format(float(v), ".17g")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _finite_or_none(v):
    if v is None:
        return None
    v = float(v)
    return v if np.isfinite(v) else None


# ---------------------------------------------------------------- outputs

def write_iterates(path: Path, history, grid) -> None:
    """One row per (iteration, node); ``u`` columns are blank at the last node."""
    it0 = history[0]
    nx, nz, m = it0.mu.shape[1], it0.z.shape[1], it0.u.shape[1]
    header = (["iteration", "node", "t"] + [f"mu{j}" for j in range(nx)]
              + [f"z{j}" for j in range(nz)] + [f"u{j}" for j in range(m)]
              + [f"var{j}" for j in range(nx)])
    rows = []
    for k, it in enumerate(history):
        var = np.diagonal(it.Sigma, axis1=1, axis2=2)
        for i in range(grid.n_nodes):
            u = [_num(v) for v in it.u[i]] if i < grid.n_stages else [""] * m
            rows.append([k, i, _num(grid.times[i])] + [_num(v) for v in it.mu[i]]
                        + [_num(v) for v in it.z[i]] + u + [_num(v) for v in var[i]])
    _write_csv(path, header, rows)


def write_controls(path: Path, u, grid) -> None:
    header = ["stage", "t"] + [f"u{j}" for j in range(u.shape[1])]
    _write_csv(path, header, [[i, _num(grid.times[i])] + [_num(v) for v in u[i]]
                              for i in range(u.shape[0])])


def read_controls(path: Path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty controls file")
    header = rows[0]
    cols = [j for j, name in enumerate(header) if name.startswith("u")]
    if not cols:
        raise ValueError(f"{path}: no control columns")
    try:
        return np.array([[float(r[j]) for j in cols] for r in rows[1:]], dtype=float).reshape(-1, len(cols))
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed controls ({exc})") from None


def write_ensemble(path: Path, ens, flags=None) -> dict:
    """Per-node mean, variance and first-collision counts.

    ``flags`` is the (paths, nodes) collision indicator; the histogram counts
    each colliding path once, at its first colliding node.
    """
    x = ens.x
    M, K, nx = x.shape
    mean = x.mean(axis=0)
    header = ["node", "t"] + [f"mean{j}" for j in range(nx)]
    if M >= 2:
        var = x.var(axis=0, ddof=1)
        header += [f"var{j}" for j in range(nx)]
    first_hits = np.zeros(K, dtype=int)
    if flags is not None:
        for row in np.flatnonzero(flags.any(axis=1)):
            first_hits[int(np.argmax(flags[row]))] += 1
        header.append("first_collisions")
    rows = []
    for k in range(K):
        row = [int(ens.nodes[k]), _num(ens.times[k])] + [_num(v) for v in mean[k]]
        if M >= 2:
            row += [_num(v) for v in var[k]]
        if flags is not None:
            row.append(int(first_hits[k]))
        rows.append(row)
    _write_csv(path, header, rows)
    return {"first_collisions": first_hits.tolist()}


# ---------------------------------------------------------------- commands

def _load_instance(args):
    cfg = load_config(args.config)
    return cfg, build_car_benchmark(cfg)


def _figures(args, fn, *a, **kw):
    if args.no_figures:
        return []
    try:
        return fn(*a, **kw)
    except ImportError:
        log.warning("matplotlib not installed; skipping figures")
        return []


def cmd_solve(args) -> int:
    cfg, inst = _load_instance(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = inst.grid(cfg.N)
    solver = SolverOptions(eps_pri=args.eps_pri, eps_dual=args.eps_dual, max_iter=args.max_iter)
    opts = SCPOptions(delta0=args.delta0, shrink=args.shrink, tol=args.tol,
                      max_iter=args.max_scp_iter, solver=solver)
    dump_dir = Path(args.dump_qp) if args.dump_qp else None
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)

    def on_subproblem(k, p):
        if dump_dir is not None:
            from .subproblem import dump_qp
            dump_qp(p, dump_dir / f"qp_{k:03d}.txt")

    jsonl = (out / "iterations.jsonl").open("w", encoding="utf-8")

    def on_iteration(rec, it):
        jsonl.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")

    t0 = time.perf_counter()
    try:
        res = run(inst, initial_guess(inst, grid), opts, on_iteration, on_subproblem)
    finally:
        jsonl.close()
    final = res.final
    write_iterates(out / "iterates.csv", res.history, grid)
    write_controls(out / "controls.csv", final.u, grid)
    summary = {
        "converged": res.converged,
        "iterations": res.iterations,
        "message": res.message,
        "final_objective": _finite_or_none(res.records[-1].objective) if res.records else None,
        "terminal_error": float(np.max(np.abs(final.mu[-1] - inst.goal_x), initial=0.0)),
        "delta": [r.delta for r in res.records],
        "metric": [r.metric for r in res.records],
        "trust_region_usage": [r.usage for r in res.records],
        "strict_trust_region": [r.strict for r in res.records],
        "trace_sigma_l2": [r.trace_sigma_l2 for r in res.records],
        "status": [r.status for r in res.records],
        "config": config_to_dict(cfg),
    }
    if args.pmp_check and res.solution is not None and res.records:
        from .pmp import surrogate_residual

        summary["surrogate_pmp"] = surrogate_residual(inst, res.subproblem, res.solution,
                                                      res.coeffs, res.lin_cost, grid)
    _write_json(out / "summary.json", summary)
    from . import plotting

    _figures(args, plotting.plot_iterations, res.history, inst, grid, out)
    print(f"{res.message}; terminal error {summary['terminal_error']:.3e}; "
          f"{time.perf_counter() - t0:.2f} s; outputs in {out}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args) -> int:
    from .montecarlo import node_collisions, simulate

    cfg, inst = _load_instance(args)
    out = Path(args.out_dir)
    controls_path = Path(args.controls) if args.controls else out / "controls.csv"
    try:
        u = read_controls(controls_path)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    grid = inst.grid(cfg.N)
    if u.shape != (grid.n_stages, inst.m):
        print(f"error: controls have shape {u.shape}, config expects "
              f"({grid.n_stages}, {inst.m})", file=sys.stderr)
        return EXIT_INPUT
    if args.paths < 1:
        print("error: --paths must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ens = simulate(inst, u, grid, args.paths, args.seed)
    flags_nodes = node_collisions(ens, inst.obstacles)
    flags = flags_nodes.any(axis=1)
    extra = write_ensemble(out / "ensemble.csv", ens, flags_nodes)
    stats = {
        "paths": ens.n_paths,
        "seed": ens.seed,
        "rng": ens.algorithm,
        "collision_rate": float(np.mean(flags)),
        "collisions": int(np.sum(flags)),
        "terminal_mean": ens.x[:, -1].mean(axis=0).tolist(),
        **extra,
    }
    if ens.n_paths >= 2:
        stats["terminal_covariance"] = np.cov(ens.x[:, -1].T, ddof=1).reshape(inst.n_x, inst.n_x).tolist()
    else:
        stats["path"] = ens.x[0].tolist()
    _write_json(out / "stats.json", stats)
    from . import plotting

    _figures(args, plotting.plot_sample_paths, ens, inst, out, flags=flags)
    print(f"collision rate {stats['collision_rate']:.4f} over {ens.n_paths} paths "
          f"(seed {ens.seed}); {time.perf_counter() - t0:.2f} s")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import format_table, run_checks

    cfg, inst = _load_instance(args)
    results = run_checks(inst, inst.grid(cfg.N), seed=args.seed, delta=args.delta0)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_AUDIT


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(default_config_path()),
                        help="benchmark JSON (default: shipped car config)")
    common.add_argument("--out-dir", default="out", help="directory for outputs")
    common.add_argument("--seed", type=int, default=0, help="Monte Carlo seed")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stochscp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", parents=[common], help="run the SCP loop")
    solve.add_argument("--eps-pri", type=float, default=1e-8)
    solve.add_argument("--eps-dual", type=float, default=1e-8)
    solve.add_argument("--max-iter", type=int, default=50000, help="inner solver iterations")
    solve.add_argument("--max-scp-iter", type=int, default=100, help="outer iterations")
    solve.add_argument("--delta0", type=float, default=100.0)
    solve.add_argument("--shrink", type=float, default=0.99)
    solve.add_argument("--tol", type=float, default=1e-3)
    solve.add_argument("--pmp-check", action="store_true",
                       help="append the surrogate PMP residual to summary.json")
    solve.add_argument("--dump-qp", metavar="DIR", help="write every subproblem as triplets")
    solve.set_defaults(func=cmd_solve)

    simulate = sub.add_parser("simulate", parents=[common], help="Monte Carlo validation")
    simulate.add_argument("--controls", help="controls CSV (default: OUT_DIR/controls.csv)")
    simulate.add_argument("--paths", type=int, default=10000)
    simulate.set_defaults(func=cmd_simulate)

    check = sub.add_parser("check", parents=[common], help="pre-flight audits")
    check.add_argument("--delta0", type=float, default=100.0)
    check.set_defaults(func=cmd_check)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
