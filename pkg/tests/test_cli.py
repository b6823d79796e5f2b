"""End-to-end tests of the command-line front end.

Configs are written to tmp_path and driven through cli.main(argv); exit codes
follow the documented contract (0 ok, 2 solved-but-not-guaranteed, 3 singular,
4 residual breach, 5 config error).
"""
from __future__ import annotations

import json
import math
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from timemix import CoefficientSet, TimeGrid, build_grid
from timemix.cauchy import assemble_schedule, solve_forward_cauchy
from timemix.cli import main


def write(path, text):
    path.write_text(textwrap.dedent(text))
    return path


def run(tmp_path, cfg_text, *extra, name="exp.toml"):
    cfg = write(tmp_path / name, cfg_text)
    out = tmp_path / "out"
    args = list(extra)
    sub = args.pop(0) if args and not args[0].startswith("-") else "solve"
    code = main([sub, "--config", str(cfg), "--out", str(out)] + args)
    report = out / "report.json"
    data = json.loads(report.read_text()) if report.exists() else None
    return code, out, data


HEAT_FWD = """\
    seed = 7

    [problem]
    kind = "forward-pde"

    [grid]
    lower = 0.0
    upper = 3.141592653589793
    interior = 15

    [time]
    horizon = 0.250
    steps = 8
    theta = 1.0

    [coefficients]
    preset = "heat"

    [condition]
    direction = "forward"
    kappa = 0.50

    [datum]
    kind = "sine"
    mode = 1
    amplitude = 1.0

    [solver]
    method = "direct"
    tol = 1e-10
    """


def test_k0_solution_matches_cauchy_bytes(tmp_path):
    cfg = HEAT_FWD.replace("kappa = 0.50", "kappa = 0.0")
    code, out, data = run(tmp_path, cfg)
    assert code == 0

    grid = build_grid(((0.0, math.pi),), (15,))
    tg = TimeGrid.uniform(0.25, 8)
    sched = assemble_schedule(CoefficientSet.heat(), grid, tg)
    x = grid.nodes()[:, 0]
    xi = 1.0 * np.sin(1 * math.pi * (x - 0.0) / (math.pi - 0.0))
    ref = solve_forward_cauchy(sched, tg, grid, xi)
    ref.to_csv(tmp_path / "ref.csv")
    assert (out / "solution.csv").read_bytes() == (tmp_path / "ref.csv").read_bytes()


def test_float_inputs_echoed_verbatim(tmp_path):
    code, out, data = run(tmp_path, HEAT_FWD)
    assert code == 0
    echo = data["config"]
    assert echo["time"]["horizon"] == "0.250"
    assert echo["condition"]["kappa"] == "0.50"
    assert echo["solver"]["tol"] == "1e-10"
    assert echo["time"]["steps"] == 8
    assert data["verdict"]["status"] == "GuaranteedKappa"
    assert data["bc_residual"] <= 1e-12


def test_json_config_accepted(tmp_path):
    cfg = {
        "seed": 7,
        "problem": {"kind": "forward-pde"},
        "grid": {"lower": 0.0, "upper": math.pi, "interior": 15},
        "time": {"horizon": 0.25, "steps": 8, "theta": 1.0},
        "coefficients": {"preset": "heat"},
        "condition": {"direction": "forward", "kappa": 0.5},
        "datum": {"kind": "sine", "mode": 1, "amplitude": 1.0},
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg).replace('"horizon": 0.25', '"horizon": 0.2500'))
    out = tmp_path / "out"
    code = main(["solve", "--config", str(path), "--out", str(out)])
    assert code == 0
    data = json.loads((out / "report.json").read_text())
    assert data["config"]["time"]["horizon"] == "0.2500"
    assert data["verdict"]["status"] == "GuaranteedKappa"


HEDGE_CFG = """\
    seed = 3

    [problem]
    kind = "hedge"

    [grid]
    interior = 15

    [time]
    horizon = 1.0
    steps = 4

    [market]
    spot = 1.0
    s_low = 0.5
    s_high = 2.0
    sigma = 0.2
    sigma_tilde = 0.2
    payoff_mode = 1
    payoff_amplitude = 0.01
    n_paths = 2000
    """


def test_reports_byte_identical_across_runs(tmp_path):
    cfg = write(tmp_path / "exp.toml", HEDGE_CFG)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["hedge", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append(out)
    assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
    assert (outs[0] / "paths.csv").read_bytes() == (outs[1] / "paths.csv").read_bytes()


def test_threads_flag_does_not_change_reports(tmp_path):
    cfg = write(tmp_path / "exp.toml", HEDGE_CFG)
    blobs = []
    for name, threads in (("t1", "1"), ("t7", "7")):
        out = tmp_path / name
        assert main(["hedge", "--config", str(cfg), "--out", str(out),
                     "--threads", threads]) == 0
        blobs.append((out / "report.json").read_bytes())
    assert blobs[0] == blobs[1]


def test_exit_not_guaranteed_but_solved(tmp_path):
    cfg = (HEAT_FWD
           .replace("kappa = 0.50", "kappa = 1.5")
           .replace("horizon = 0.250", "horizon = 0.1")
           .replace("steps = 8", "steps = 1"))
    code, out, data = run(tmp_path, cfg)
    assert code == 2
    assert data["verdict"]["status"] == "FredholmNumeric"
    assert not data["verdict"]["guaranteed"]
    assert data["exit_code"] == 2
    # the solve itself is still performed and its artifacts written
    assert (out / "solution.csv").exists()
    assert data["bc_residual"] <= 1e-10


def test_exit_singular_system(tmp_path):
    kstar = 1.0 + 8.0 / math.pi**2  # kills mode 1 of the single-node instance
    cfg = (HEAT_FWD
           .replace("interior = 15", "interior = 1")
           .replace("horizon = 0.250", "horizon = 1.0")
           .replace("steps = 8", "steps = 1")
           .replace("kappa = 0.50", f"kappa = {kstar!r}"))
    code, out, data = run(tmp_path, cfg)
    assert code == 3
    assert data["verdict"]["status"] == "SingularDetected"
    assert data["sigma_min"] < 1e-10
    assert not (out / "solution.csv").exists()


def test_exit_residual_breach(tmp_path):
    cfg = HEAT_FWD.replace('method = "direct"',
                           'method = "direct"\n    residual_tol = 1e-30')
    code, out, data = run(tmp_path, cfg)
    assert code == 4
    assert data["bc_residual"] > 1e-30
    assert data["exit_code"] == 4


def test_config_error_bad_toml(tmp_path, capsys):
    cfg = write(tmp_path / "bad.toml", "[problem\nkind = ???\n")
    assert main(["solve", "--config", str(cfg)]) == 5
    assert "line" in capsys.readouterr().err


def test_config_error_missing_datum_file(tmp_path, capsys):
    cfg = HEAT_FWD.replace('kind = "sine"\n    mode = 1\n    amplitude = 1.0',
                           'kind = "file"\n    path = "no-such-datum.csv"')
    code, out, data = run(tmp_path, cfg)
    assert code == 5
    assert "datum" in capsys.readouterr().err


def test_config_error_mass_off_knot(tmp_path, capsys):
    cfg = HEAT_FWD.replace("kappa = 0.50", "masses = [[0.33, 0.5]]")
    code, out, data = run(tmp_path, cfg)
    assert code == 5
    assert "knot" in capsys.readouterr().err


def test_config_error_size_guard(tmp_path, capsys):
    cfg = HEAT_FWD.replace("interior = 15", "interior = 200000")
    code, out, data = run(tmp_path, cfg)
    assert code == 5
    assert "interior" in capsys.readouterr().err


def test_usage_error_exits_five(tmp_path):
    assert main(["solve"]) == 5
    assert main(["no-such-command", "--config", "x"]) == 5


def test_condition_flags_override_config(tmp_path):
    cfg = "\n".join(l for l in textwrap.dedent(HEAT_FWD).splitlines()
                    if "kappa" not in l and "[condition]" not in l
                    and "direction" not in l)
    path = write(tmp_path / "nocond.toml", cfg)

    out1 = tmp_path / "o1"
    code = main(["solve", "--config", str(path), "--out", str(out1),
                 "--direction", "forward", "--kappa", "0.5"])
    assert code == 0
    d1 = json.loads((out1 / "report.json").read_text())
    assert d1["verdict"]["status"] == "GuaranteedKappa"
    assert d1["overrides"]["kappa"] == "0.5"

    out2 = tmp_path / "o2"
    code = main(["solve", "--config", str(path), "--out", str(out2),
                 "--direction", "forward", "--masses", "0.125:0.3,0.25:0.2"])
    assert code == 0
    d2 = json.loads((out2 / "report.json").read_text())
    assert d2["verdict"]["status"] == "GuaranteedKernelMass"
    assert d2["verdict"]["kernel_mass"] == pytest.approx(0.5)


def test_kernel_csv_flag(tmp_path):
    cfg = "\n".join(l for l in textwrap.dedent(HEAT_FWD).splitlines()
                    if "kappa" not in l)
    path = write(tmp_path / "nocond.toml", cfg)
    kern = tmp_path / "kern.csv"
    kern.write_text("".join(f"{0.25 * k / 8!r},3.2\n" for k in range(9)))
    out = tmp_path / "out"
    code = main(["solve", "--config", str(path), "--out", str(out),
                 "--kernel", str(kern)])
    assert code == 0
    data = json.loads((out / "report.json").read_text())
    # constant kernel 3.2 over [0, 0.25] integrates to mass 0.8
    assert data["verdict"]["status"] == "GuaranteedKernelMass"
    assert data["verdict"]["kernel_mass"] == pytest.approx(0.8)


def test_backward_spde_solve_artifacts(tmp_path):
    cfg = """\
    seed = 11

    [problem]
    kind = "backward-spde"

    [grid]
    lower = 0.0
    upper = 3.141592653589793
    interior = 9

    [time]
    horizon = 0.5
    steps = 4

    [lattice]
    branches = 1

    [coefficients]
    preset = "heat"
    noise_advection = [0.2]

    [condition]
    direction = "backward"
    kappa = 0.5

    [datum]
    kind = "random-leaf"
    scale = 0.1
    """
    code, out, data = run(tmp_path, cfg)
    assert code == 0
    assert data["verdict"]["status"] == "GuaranteedKappa"
    assert data["bc_residual"] <= 1e-8
    sol = (out / "solution.csv").read_text().splitlines()
    assert sol[0] == "step,state,node,value"
    loads = (out / "loadings.csv").read_text().splitlines()
    assert loads[0] == "step,state,node,z_1"


def test_hedge_report_contents(tmp_path):
    code, out, data = run(tmp_path, HEDGE_CFG, "hedge")
    assert code == 0
    assert data["verdict"]["status"] == "GuaranteedKappa"
    assert data["stagnation"] <= 1e-8
    assert data["martingale"]["passed"] is True
    assert np.isfinite(data["delta"]["mean"]) and data["delta"]["sd"] > 0
    lines = (out / "paths.csv").read_text().splitlines()
    assert lines[0].startswith("path,exit_step,exit_time")
    assert len(lines) == 2001


PROBE_CFG = """\
    seed = 6

    [problem]
    kind = "probe"

    [grid]
    lower = 0.0
    upper = 3.141592653589793
    interior = 31

    [time]
    horizon = 0.25
    steps = 32
    theta = 1.0

    [coefficients]
    preset = "heat"

    [datum]
    kind = "sine"
    mode = 1
    amplitude = 1.0

    [probe]
    kappa = 0.5
    n_paths = 2000
    checkpoints = 3
    """


def test_probe_report(tmp_path):
    code, out, data = run(tmp_path, PROBE_CFG, "probe")
    assert code == 0
    assert data["duality_residual"] <= 1e-10
    assert data["martingale"]["passed"] is True
    assert len(data["martingale"]["times"]) == 3


CONV_CFG = """\
    [problem]
    kind = "forward-pde"

    [grid]
    lower = 0.0
    upper = 3.141592653589793
    interior = 15

    [time]
    horizon = 1.0
    steps = 16
    theta = 1.0

    [coefficients]
    preset = "heat"

    [condition]
    direction = "forward"
    kappa = 0.5

    [datum]
    kind = "sine"
    mode = 1
    amplitude = 1.0

    [converge]
    levels = 4
    axis = "both"
    """


def test_converge_theta1_first_order(tmp_path):
    code, out, data = run(tmp_path, CONV_CFG, "converge", name="conv.toml")
    assert code == 0
    tab = json.loads((out / "convergence.json").read_text())
    assert tab["oracle"] == "eigen"
    errs = [row["error"] for row in tab["rows"]]
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert 0.8 <= tab["observed_order"] <= 1.2


def test_converge_crank_second_order(tmp_path):
    cfg = CONV_CFG.replace("theta = 1.0", "theta = 0.5")
    code, out, data = run(tmp_path, cfg, "converge", name="conv.toml")
    assert code == 0
    tab = json.loads((out / "convergence.json").read_text())
    assert 1.7 <= tab["observed_order"] <= 2.3


def test_converge_spatial_second_order(tmp_path):
    cfg = (CONV_CFG.replace('axis = "both"', 'axis = "space"')
           .replace("steps = 16", "steps = 64"))
    code, out, data = run(tmp_path, cfg, "converge", name="conv.toml")
    assert code == 0
    tab = json.loads((out / "convergence.json").read_text())
    assert 1.7 <= tab["observed_order"] <= 2.3


def test_dump_lattice(tmp_path):
    cfg = """\
    [problem]
    kind = "backward-spde"

    [grid]
    lower = 0.0
    upper = 1.0
    interior = 9

    [time]
    horizon = 1.0
    steps = 4

    [lattice]
    branches = 2
    """
    code, out, data = run(tmp_path, cfg, "dump-lattice")
    assert code == 0
    snap = json.loads((out / "lattice.json").read_text())
    assert snap["steps"] == 4 and snap["components"] == 2
    assert [lv["states"] for lv in snap["levels"]] == [1, 4, 9, 16, 25]


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path / "exp.toml", textwrap.dedent(HEAT_FWD))
    out = tmp_path / "out"
    proc = subprocess.run(
        [sys.executable, "-m", "timemix.cli", "solve",
         "--config", str(cfg), "--out", str(out)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "GuaranteedKappa" in proc.stdout
    assert (out / "report.json").exists()
