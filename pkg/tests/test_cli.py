from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

from stochscp import cli
from stochscp.problem import config_to_dict, default_config

FAST = ["--no-figures"]


def _config(tmp_path, **changes):
    cfg = dataclasses.replace(default_config(), **changes)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config_to_dict(cfg), indent=2))
    return str(path)


def test_missing_config_exits_1(tmp_path, capsys):
    code = cli.main(["solve", "--config", str(tmp_path / "nope.json"), "--out-dir",
                     str(tmp_path / "o")] + FAST)
    assert code == cli.EXIT_INPUT
    assert "config error" in capsys.readouterr().err


def test_bad_config_value_exits_1(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "horizon": -2\n}')
    assert cli.main(["check", "--config", str(path)]) == cli.EXIT_INPUT


def test_two_node_grid_runs(tmp_path):
    out = tmp_path / "o"
    code = cli.main(["solve", "--config", _config(tmp_path, N=2), "--out-dir", str(out),
                     "--max-scp-iter", "5"] + FAST)
    assert code in (cli.EXIT_OK, cli.EXIT_NOT_CONVERGED)
    assert cli.read_controls(out / "controls.csv").shape == (1, 2)


def test_solve_writes_outputs(tmp_path):
    out = tmp_path / "o"
    code = cli.main(["solve", "--out-dir", str(out), "--pmp-check", "--dump-qp",
                     str(tmp_path / "qp")] + FAST)
    assert code == cli.EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["converged"] and summary["terminal_error"] < 1e-6
    assert summary["surrogate_pmp"]["label"] == "surrogate PMP residual"
    n = summary["iterations"]
    assert len(summary["trust_region_usage"]) == n
    assert len((out / "iterations.jsonl").read_text().splitlines()) == n
    assert len(list((tmp_path / "qp").glob("qp_*.txt"))) == n
    lines = (out / "iterates.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,node,t,mu0,mu1,mu2,z0,z1,u0,u1,var0")
    assert len(lines) == 1 + (n + 1) * 41
    assert lines[41].split(",")[8] == ""  # no control at the final node
    u = cli.read_controls(out / "controls.csv")
    assert u.shape == (40, 2)


def test_controls_round_trip(tmp_path):
    from stochscp.problem import TimeGrid

    u = np.random.default_rng(0).normal(size=(5, 2)) / 3.0
    cli.write_controls(tmp_path / "c.csv", u, TimeGrid(6, 1.0))
    np.testing.assert_array_equal(cli.read_controls(tmp_path / "c.csv"), u)


def test_simulate_rejects_bad_controls(tmp_path):
    (tmp_path / "c.csv").write_text("stage,t,u0,u1\n0,0,1,2\n")
    code = cli.main(["simulate", "--controls", str(tmp_path / "c.csv"), "--out-dir",
                     str(tmp_path / "o")] + FAST)
    assert code == cli.EXIT_INPUT
    (tmp_path / "d.csv").write_text("stage,t,u0,u1\n0,0,x,2\n")
    assert cli.main(["simulate", "--controls", str(tmp_path / "d.csv")] + FAST) == cli.EXIT_INPUT
    assert cli.main(["simulate", "--controls", str(tmp_path / "missing.csv")] + FAST) == cli.EXIT_INPUT


def _zero_controls(tmp_path, n_stages=40):
    from stochscp.problem import TimeGrid

    path = tmp_path / "zero.csv"
    cli.write_controls(path, np.zeros((n_stages, 2)), TimeGrid(n_stages + 1, 5.0))
    return str(path)


def test_simulate_zero_noise_rate_is_binary(tmp_path):
    cfg = _config(tmp_path, alpha2=0.0, beta2=0.0)
    out = tmp_path / "o"
    code = cli.main(["simulate", "--config", cfg, "--controls", _zero_controls(tmp_path),
                     "--paths", "50", "--out-dir", str(out)] + FAST)
    assert code == cli.EXIT_OK
    stats = json.loads((out / "stats.json").read_text())
    assert stats["collision_rate"] in (0.0, 1.0)
    assert np.allclose(stats["terminal_covariance"], 0.0)


def test_simulate_single_path(tmp_path):
    out = tmp_path / "o"
    code = cli.main(["simulate", "--controls", _zero_controls(tmp_path), "--paths", "1",
                     "--out-dir", str(out)] + FAST)
    assert code == cli.EXIT_OK
    stats = json.loads((out / "stats.json").read_text())
    assert "terminal_covariance" not in stats and len(stats["path"]) == 41
    header = (out / "ensemble.csv").read_text().splitlines()[0]
    assert "var0" not in header and header.endswith("first_collisions")
    assert cli.main(["simulate", "--controls", _zero_controls(tmp_path), "--paths", "0",
                     "--out-dir", str(out)] + FAST) == cli.EXIT_INPUT


def test_check_exit_codes(tmp_path, monkeypatch):
    from stochscp import checks

    assert cli.main(["check"]) == cli.EXIT_OK

    real = checks.jacobian_audit

    def broken(inst, *a, **kw):
        def bad(t, u, x, z):
            jx, jz, ju = inst.drift_x_jac(t, u, x, z)
            return 1.01 * jx, jz, ju
        return real(dataclasses.replace(inst, drift_x_jac=bad), *a, **kw)

    monkeypatch.setattr(checks, "jacobian_audit", broken)
    assert cli.main(["check"]) == cli.EXIT_AUDIT


def test_check_zero_noise_config_passes(tmp_path, capsys):
    assert cli.main(["check", "--config", _config(tmp_path, alpha2=0.0, beta2=0.0)]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


def test_figures_are_written(tmp_path):
    pytest.importorskip("matplotlib")
    out = tmp_path / "o"
    assert cli.main(["solve", "--out-dir", str(out)]) == cli.EXIT_OK
    for name in ("trajectories.png", "velocities.png", "controls.png"):
        assert (out / name).stat().st_size > 0
    assert cli.main(["simulate", "--out-dir", str(out), "--paths", "200"]) == cli.EXIT_OK
    assert (out / "sample_paths.png").stat().st_size > 0
