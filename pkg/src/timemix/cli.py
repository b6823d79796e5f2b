"""Config-driven command line: solves, hedging runs, diagnostics, refinements.

Experiments are described in TOML (JSON is accepted too). Every floating-point
input is parsed as a decimal string and echoed back verbatim in the report, so
the record of a run shows the numbers exactly as they were written. Reports
are canonical JSON (sorted keys, repr floats): the same config and seed
produce byte-identical bytes, and every run embeds the solvability verdict
and the boundary-condition residual.

Exit codes: 0 solved with a guaranteed certificate, 2 solved but the verdict
is numeric-only, 3 singular fixed-point system, 4 residual or statistical-band
breach, 5 unusable configuration or command line.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python 3.10
    import tomli as tomllib

from .cauchy import assemble_schedule, solve_backward_cauchy
from .discretization import CoefficientSet, Grid, TimeGrid, build_grid
from .discretization.coefficients import (affine_field, constant_field,
                                          load_table_csv, power_field)
from .lattice import build_lattice, dump_lattice
from .mixing import NonlocalCondition, SingularSystemError, solve_nonlocal
from .portfolio import (MarketParams, delta_hedge_residual, simulate_market,
                        solve_hedge_spde, stagnation_check, wealth_process)
from .probe import duality_residual, fk_simulate, martingale_test
from .spde import SpdeProblem

EXIT_OK = 0
EXIT_NOT_GUARANTEED = 2
EXIT_SINGULAR = 3
EXIT_BREACH = 4
EXIT_CONFIG = 5

_KINDS = ("forward-pde", "forward-spde", "backward-spde", "hedge", "probe")

# hard caps on instance sizes accepted from a config file
_MAX_INTERIOR = 65_535
_MAX_STEPS = 1_048_576
_MAX_BRANCHES = 6
_MAX_PATHS = 5_000_000

_MISSING = object()


class ConfigFloat(float):
    """Float that remembers the decimal spelling it was parsed from."""

    __slots__ = ("text",)

    def __new__(cls, text):
        self = super().__new__(cls, text)
        self.text = str(text)
        return self


class ConfigError(ValueError):
    """Unusable configuration; the command line maps it to exit code 5."""


# --------------------------------------------------------------------------
# config loading and field access


def load_config(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text, parse_float=ConfigFloat)
        return tomllib.loads(text, parse_float=ConfigFloat)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path.name}: {e}") from None


def _section(doc: dict, name: str, *, required: bool = True) -> dict:
    sec = doc.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing [{name}] section")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _field(sec: dict, where: str, key: str, default=_MISSING):
    if key in sec:
        return sec[key]
    if default is _MISSING:
        raise ConfigError(f"{where}.{key} is required")
    return default


def _num(sec: dict, where: str, key: str, default=_MISSING, *,
         lo=None, hi=None, integer: bool = False):
    v = _field(sec, where, key, default)
    if v is None:
        return None
    bad = isinstance(v, bool) or not isinstance(v, (int, float))
    if bad or (integer and not isinstance(v, int)):
        want = "an integer" if integer else "a number"
        raise ConfigError(f"{where}.{key} must be {want}")
    v = int(v) if integer else float(v)
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ConfigError(f"{where}.{key} = {v} is outside [{lo}, {hi}]")
    return v


def _echo(obj):
    """Config tree for the report; floats keep their written spelling."""
    if isinstance(obj, ConfigFloat):
        return obj.text
    if isinstance(obj, dict):
        return {k: _echo(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_echo(v) for v in obj]
    return obj


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --------------------------------------------------------------------------
# builders: coefficients, condition, datum


def _coefficient_field(entry, where: str, base_dir: Path, tg: TimeGrid, *,
                       vector: bool = False):
    """Build one field from a config value; returns (field, constant|None)."""
    if isinstance(entry, (int, float)) and not isinstance(entry, bool):
        return constant_field(float(entry), vector=vector), float(entry)
    if isinstance(entry, str):
        path = base_dir / entry
        if not path.exists():
            raise ConfigError(f"{where}: table file {entry} does not exist")
        return load_table_csv(path, tg.knots), None
    if isinstance(entry, dict):
        shape = entry.get("shape")
        if shape == "constant":
            v = _num(entry, where, "value")
            return constant_field(v, vector=vector), v
        if shape == "affine":
            slopes = entry.get("slopes", [])
            if not isinstance(slopes, list):
                raise ConfigError(f"{where}.slopes must be a list")
            return affine_field(_num(entry, where, "intercept", 0.0),
                                [float(s) for s in slopes], vector=vector), None
        if shape == "geometric-bm":
            return power_field(_num(entry, where, "factor"),
                               _num(entry, where, "power"),
                               vector=vector), None
        if shape == "table":
            return _coefficient_field(str(_field(entry, where, "path")),
                                      where, base_dir, tg, vector=vector)
        raise ConfigError(
            f"{where}.shape must be constant, affine, geometric-bm, or table")
    raise ConfigError(f"{where} must be a number, a shape table, or a CSV path")


def _coefficients(doc: dict, base_dir: Path, tg: TimeGrid):
    """CoefficientSet from [coefficients]; returns (set, is_plain_heat)."""
    sec = _section(doc, "coefficients", required=False)
    preset = sec.get("preset", "heat")
    if preset != "heat":
        raise ConfigError(f"coefficients.preset {preset!r} is not known")
    cs = CoefficientSet.heat()
    consts: dict[str, float | None] = {"diffusion": 1.0}
    scalar_slots = (("diffusion", False), ("advection", True),
                    ("reaction", False), ("advection_nondiv", True),
                    ("reaction_nondiv", False))
    for key, vector in scalar_slots:
        if key in sec:
            f, c = _coefficient_field(sec[key], f"coefficients.{key}",
                                      base_dir, tg, vector=vector)
            setattr(cs, key, f)
            consts[key] = c
    # a constant drift coefficient means the same thing in both forms
    if "advection" in sec and "advection_nondiv" not in sec \
            and consts.get("advection") is not None:
        cs.advection_nondiv = constant_field(consts["advection"], vector=True)
    if "reaction" in sec and "reaction_nondiv" not in sec \
            and consts.get("reaction") is not None:
        cs.reaction_nondiv = constant_field(consts["reaction"])
    noise_consts: list[float | None] = []
    for key, vector in (("noise_advection", True), ("noise_reaction", False)):
        if key in sec:
            specs = sec[key]
            if not isinstance(specs, list):
                raise ConfigError(f"coefficients.{key} must be a list")
            built = []
            for i, sp in enumerate(specs):
                f, c = _coefficient_field(sp, f"coefficients.{key}[{i}]",
                                          base_dir, tg, vector=vector)
                built.append(f)
                if key == "noise_advection":
                    noise_consts.append(c)
            setattr(cs, key, tuple(built))
    if cs.noise_reaction and len(cs.noise_reaction) != len(cs.noise_advection):
        raise ConfigError("coefficients.noise_reaction length must match "
                          "coefficients.noise_advection")
    if "coercivity_margin" in sec:
        cs.coercivity_margin = _num(sec, "coefficients", "coercivity_margin")
    elif cs.noise_advection:
        d = consts.get("diffusion")
        if d is None or any(c is None for c in noise_consts):
            raise ConfigError("coefficients.coercivity_margin is required "
                              "when noise fields are not constants")
        cs.coercivity_margin = d - 0.5 * sum(c * c for c in noise_consts)
    heat_like = set(sec) <= {"preset"}
    return cs, heat_like


def _kernel_fn(entry, base_dir: Path, where: str):
    if isinstance(entry, (int, float)) and not isinstance(entry, bool):
        c = float(entry)
        return lambda t: c
    if isinstance(entry, str):
        path = base_dir / entry
        if not path.exists():
            raise ConfigError(f"{where}: file {entry} does not exist")
        pts = np.loadtxt(path, delimiter=",", ndmin=2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ConfigError(f"{where}: expected rows of time,weight")
        order = np.argsort(pts[:, 0])
        ts, vs = pts[order, 0], pts[order, 1]
        return lambda t: float(np.interp(t, ts, vs))
    raise ConfigError(f"{where} must be a constant or a CSV path")


def _condition_from_section(sec: dict, base_dir: Path, tg: TimeGrid):
    direction = _field(sec, "condition", "direction")
    kappa = sec.get("kappa")
    kernel = sec.get("kernel")
    masses = sec.get("masses", [])
    if not isinstance(masses, list):
        raise ConfigError("condition.masses must be a list of [time, weight]")
    pairs = []
    for i, item in enumerate(masses):
        if not isinstance(item, list) or len(item) != 2:
            raise ConfigError(f"condition.masses[{i}] must be [time, weight]")
        pairs.append((float(item[0]), float(item[1])))
    kernel_fn = None if kernel is None else _kernel_fn(kernel, base_dir,
                                                       "condition.kernel")
    try:
        cond = NonlocalCondition(
            direction=direction, kernel=kernel_fn, masses=tuple(pairs),
            kappa=None if kappa is None else float(kappa))
        cond.resolve(tg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"condition: {e}") from None
    return cond


def _parse_masses(text: str):
    pairs = []
    for part in text.split(","):
        t, sep, w = part.partition(":")
        try:
            if not sep:
                raise ValueError
            pairs.append((float(t), float(w)))
        except ValueError:
            raise ConfigError(
                f"--masses: cannot parse {part!r} (want time:weight)") from None
    return tuple(pairs)


def _build_datum(cfg: "ExperimentConfig", grid: Grid):
    sec = cfg.datum_sec
    kind = _field(sec, "datum", "kind", "zero")
    x = grid.nodes()[:, 0]
    if kind == "zero":
        return np.zeros(x.size)
    if kind == "sine":
        mode = _num(sec, "datum", "mode", 1, integer=True, lo=1)
        amp = _num(sec, "datum", "amplitude", 1.0)
        lo, hi = grid.lo[0], grid.hi[0]
        return amp * np.sin(mode * math.pi * (x - lo) / (hi - lo))
    if kind == "file":
        rel = str(_field(sec, "datum", "path"))
        path = cfg.base_dir / rel
        if not path.exists():
            raise ConfigError(f"datum.path: file {rel} does not exist")
        arr = np.loadtxt(path, delimiter=",", ndmin=1, dtype=float)
        if arr.shape != (x.size,):
            raise ConfigError(
                f"datum.path: expected {x.size} values, got shape {arr.shape}")
        return arr
    if kind == "random-leaf":
        if cfg.kind != "backward-spde":
            raise ConfigError(
                "datum.kind random-leaf needs problem.kind backward-spde")
        scale = _num(sec, "datum", "scale", 1.0)
        leaves = (cfg.tg.steps + 1) ** cfg.branches
        rng = np.random.default_rng(cfg.seed)
        return scale * rng.standard_normal((leaves, x.size))
    raise ConfigError(
        f"datum.kind {kind!r} is not known (zero, sine, file, random-leaf)")


# --------------------------------------------------------------------------
# parsed experiment


@dataclass
class ExperimentConfig:
    kind: str
    raw: dict
    base_dir: Path
    seed: int
    tg: TimeGrid
    theta: float
    form: str
    branches: int
    grid: Grid | None
    interior: int | None
    coeffs: CoefficientSet | None
    heat_like: bool
    condition: NonlocalCondition | None
    datum_sec: dict
    solver: dict
    outputs: dict


def parse_config(doc: dict, base_dir: Path, seed_override=None) -> ExperimentConfig:
    prob = _section(doc, "problem")
    kind = _field(prob, "problem", "kind")
    if kind not in _KINDS:
        raise ConfigError(
            f"problem.kind {kind!r} is not one of {', '.join(_KINDS)}")
    form = _field(prob, "problem", "form", "divergence")
    if form not in ("divergence", "nondivergence"):
        raise ConfigError("problem.form must be divergence or nondivergence")

    tsec = _section(doc, "time")
    if "knots" in tsec:
        knots = tsec["knots"]
        if not isinstance(knots, list) or len(knots) < 2:
            raise ConfigError("time.knots must list at least two times")
        if len(knots) - 1 > _MAX_STEPS:
            raise ConfigError(f"time.knots: more than {_MAX_STEPS} steps")
        try:
            tg = TimeGrid(np.asarray([float(t) for t in knots]))
        except ValueError as e:
            raise ConfigError(f"time.knots: {e}") from None
    else:
        horizon = _num(tsec, "time", "horizon")
        if horizon <= 0:
            raise ConfigError("time.horizon must be positive")
        steps = _num(tsec, "time", "steps", integer=True, lo=1, hi=_MAX_STEPS)
        tg = TimeGrid.uniform(horizon, steps)
    theta = _num(tsec, "time", "theta", 1.0, lo=0.5, hi=1.0)

    lsec = _section(doc, "lattice",
                    required=kind in ("forward-spde", "backward-spde"))
    branches = _num(lsec, "lattice", "branches", 1, integer=True,
                    lo=1, hi=_MAX_BRANCHES)

    grid = None
    coeffs = None
    heat_like = True
    condition = None
    gsec = _section(doc, "grid")
    interior = _num(gsec, "grid", "interior", integer=True,
                    lo=1, hi=_MAX_INTERIOR)
    if kind != "hedge":
        lo = _num(gsec, "grid", "lower")
        hi = _num(gsec, "grid", "upper")
        if hi <= lo:
            raise ConfigError("grid.upper must exceed grid.lower")
        grid = build_grid(((lo, hi),), (interior,), allow_tiny=True)
        coeffs, heat_like = _coefficients(doc, base_dir, tg)
        if "condition" in doc:
            condition = _condition_from_section(
                _section(doc, "condition"), base_dir, tg)

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    if seed_override is not None:
        seed = int(seed_override)

    ssec = _section(doc, "solver", required=False)
    method = _field(ssec, "solver", "method", "direct")
    if method not in ("direct", "neumann"):
        raise ConfigError("solver.method must be direct or neumann")
    solver = {
        "method": method,
        "tol": _num(ssec, "solver", "tol", 1e-10, lo=0.0),
        "max_iter": _num(ssec, "solver", "max_iter", 256, integer=True, lo=1),
        "residual_tol": _num(ssec, "solver", "residual_tol", 1e-8),
    }

    osec = _section(doc, "output", required=False)
    outputs = {
        "report": str(_field(osec, "output", "report", "report.json")),
        "solution": str(_field(osec, "output", "solution", "solution.csv")),
        "loadings": str(_field(osec, "output", "loadings", "loadings.csv")),
        "paths": str(_field(osec, "output", "paths", "paths.csv")),
        "table": str(_field(osec, "output", "table", "convergence.json")),
        "lattice": str(_field(osec, "output", "lattice", "lattice.json")),
    }

    return ExperimentConfig(
        kind=kind, raw=doc, base_dir=base_dir, seed=seed, tg=tg, theta=theta,
        form=form, branches=branches, grid=grid, interior=interior,
        coeffs=coeffs, heat_like=heat_like, condition=condition,
        datum_sec=_section(doc, "datum", required=False), solver=solver,
        outputs=outputs)


# --------------------------------------------------------------------------
# report plumbing


def _base_report(cfg: ExperimentConfig, overrides: dict) -> dict:
    return {"config": _echo(cfg.raw), "overrides": overrides,
            "kind": cfg.kind, "seed": cfg.seed, "artifacts": {}}


def _write_report(out_dir: Path, cfg: ExperimentConfig, report: dict) -> None:
    name = report["artifacts"]["report"] = cfg.outputs["report"]
    payload = json.dumps(_jsonify(report), sort_keys=True, indent=2) + "\n"
    (out_dir / name).write_text(payload)


def _overrides(ns, names) -> dict:
    out = {}
    for name in names:
        val = getattr(ns, name, None)
        if val is not None:
            out[name] = val if isinstance(val, str) else int(val)
    return out


def _solver_opts(cfg: ExperimentConfig, ns) -> tuple[str, float]:
    method = getattr(ns, "method", None) or cfg.solver["method"]
    tol = cfg.solver["tol"]
    raw = getattr(ns, "tol", None)
    if raw is not None:
        try:
            tol = float(raw)
        except ValueError:
            raise ConfigError(f"--tol: cannot parse {raw!r}") from None
    return method, tol


def _resolve_condition(cfg: ExperimentConfig, ns) -> NonlocalCondition:
    flag_kappa = getattr(ns, "kappa", None)
    flag_kernel = getattr(ns, "kernel", None)
    flag_masses = getattr(ns, "masses", None)
    direction = getattr(ns, "direction", None)
    if flag_kappa is None and flag_kernel is None and flag_masses is None:
        if cfg.condition is None:
            raise ConfigError("missing [condition] section "
                              "(or --kappa/--kernel/--masses flags)")
        cond = cfg.condition
        if direction is not None and direction != cond.direction:
            cond = NonlocalCondition(
                direction=direction, kernel=cond.kernel, masses=cond.masses,
                kappa=cond.kappa, kernel_matrix=cond.kernel_matrix,
                mass_matrices=cond.mass_matrices)
        return cond
    if direction is None:
        direction = (cfg.condition.direction if cfg.condition is not None
                     else _section(cfg.raw, "condition", required=False)
                     .get("direction"))
    if direction is None:
        raise ConfigError("--direction (or condition.direction) is required "
                          "with condition flags")
    kappa = None
    if flag_kappa is not None:
        try:
            kappa = float(flag_kappa)
        except ValueError:
            raise ConfigError(f"--kappa: cannot parse {flag_kappa!r}") from None
    kernel = (None if flag_kernel is None
              else _kernel_fn(flag_kernel, Path.cwd(), "--kernel"))
    masses = _parse_masses(flag_masses) if flag_masses is not None else ()
    try:
        cond = NonlocalCondition(direction=direction, kernel=kernel,
                                 masses=masses, kappa=kappa)
        cond.resolve(cfg.tg)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cond


# --------------------------------------------------------------------------
# subcommand runners


def run_solve(cfg: ExperimentConfig, ns, out_dir: Path) -> int:
    if cfg.kind not in ("forward-pde", "forward-spde", "backward-spde"):
        raise ConfigError(f"solve cannot run problem.kind {cfg.kind!r}")
    cond = _resolve_condition(cfg, ns)
    method, tol = _solver_opts(cfg, ns)
    stochastic = cfg.kind.endswith("-spde")
    lattice = None
    if stochastic:
        if cfg.coeffs.n_noise != cfg.branches:
            raise ConfigError("lattice.branches must equal the number of "
                              "noise operators "
                              f"({cfg.branches} != {cfg.coeffs.n_noise})")
        if cfg.kind == "backward-spde" and cfg.theta != 1.0:
            raise ConfigError(
                "backward-spde stepping is implicit-only (time.theta = 1)")
        try:
            lattice = build_lattice(cfg.tg, cfg.branches)
        except ValueError as e:
            raise ConfigError(f"lattice: {e}") from None
    datum = _build_datum(cfg, cfg.grid)

    problem = SpdeProblem(coeffs=cfg.coeffs, grid=cfg.grid, tg=cfg.tg,
                          form=cfg.form)
    report = _base_report(cfg, _overrides(
        ns, ("direction", "kappa", "kernel", "masses", "method", "tol")))
    try:
        sol, rep = solve_nonlocal(problem, cond, datum, lattice=lattice,
                                  theta=cfg.theta, method=method, tol=tol,
                                  max_iter=cfg.solver["max_iter"])
    except SingularSystemError as e:
        report.update(verdict=e.verdict.as_dict(), sigma_min=e.sigma_min,
                      error=str(e), exit_code=EXIT_SINGULAR)
        _write_report(out_dir, cfg, report)
        print(f"verdict {e.verdict.status.value}: {e}")
        return EXIT_SINGULAR
    except ValueError as e:
        report.update(error=str(e), exit_code=EXIT_BREACH)
        _write_report(out_dir, cfg, report)
        print(f"solve failed: {e}", file=sys.stderr)
        return EXIT_BREACH

    if hasattr(sol, "values_csv"):
        (out_dir / cfg.outputs["solution"]).write_text(sol.values_csv())
        if sol.martingale is not None:
            (out_dir / cfg.outputs["loadings"]).write_text(sol.martingale_csv())
            report["artifacts"]["loadings"] = cfg.outputs["loadings"]
        max_abs = max(float(np.max(np.abs(lv))) for lv in sol.values)
    else:
        sol.to_csv(out_dir / cfg.outputs["solution"])
        max_abs = float(np.max(np.abs(sol.values)))
    report["artifacts"]["solution"] = cfg.outputs["solution"]

    breach = rep.bc_residual > cfg.solver["residual_tol"]
    code = (EXIT_BREACH if breach
            else EXIT_OK if rep.verdict.guaranteed else EXIT_NOT_GUARANTEED)
    report.update(rep.as_dict(), solution={"max_abs": max_abs}, exit_code=code)
    _write_report(out_dir, cfg, report)
    print(f"verdict {rep.verdict.status.value} "
          f"(bc residual {rep.bc_residual:.3e}, method {rep.method})")
    if breach:
        print(f"boundary-condition residual exceeds "
              f"{cfg.solver['residual_tol']:g}", file=sys.stderr)
    return code


def run_hedge(cfg: ExperimentConfig, ns, out_dir: Path) -> int:
    if cfg.kind != "hedge":
        raise ConfigError("hedge needs problem.kind = \"hedge\"")
    msec = _section(cfg.raw, "market")
    spot = _num(msec, "market", "spot")
    s_low = _num(msec, "market", "s_low")
    s_high = _num(msec, "market", "s_high")
    sigma = _num(msec, "market", "sigma")
    sigma_tilde = _num(msec, "market", "sigma_tilde")
    mode = _num(msec, "market", "payoff_mode", 1, integer=True, lo=1)
    amp = _num(msec, "market", "payoff_amplitude", 0.01)
    n_paths = _num(msec, "market", "n_paths", integer=True,
                   lo=1, hi=_MAX_PATHS)
    interior = _num(_section(cfg.raw, "grid"), "grid", "interior",
                    integer=True, lo=1, hi=_MAX_INTERIOR)

    def payoff(x):
        return amp * np.sin(mode * math.pi * (x - s_low) / (s_high - s_low))

    method, tol = _solver_opts(cfg, ns)
    try:
        mp = MarketParams(spot=spot, s_low=s_low, s_high=s_high,
                          horizon=cfg.tg.horizon, sigma=sigma,
                          sigma_tilde=sigma_tilde, payoff=payoff)
        grid = build_grid(((s_low, s_high),), (interior,), allow_tiny=True)
        lattice = build_lattice(cfg.tg, 1)
    except ValueError as e:
        raise ConfigError(f"market: {e}") from None

    report = _base_report(cfg, _overrides(ns, ("method", "tol")))
    try:
        u, rep = solve_hedge_spde(mp, grid, cfg.tg, lattice,
                                  method=method, tol=tol)
    except SingularSystemError as e:
        report.update(verdict=e.verdict.as_dict(), sigma_min=e.sigma_min,
                      error=str(e), exit_code=EXIT_SINGULAR)
        _write_report(out_dir, cfg, report)
        print(f"verdict {e.verdict.status.value}: {e}")
        return EXIT_SINGULAR
    except ValueError as e:
        raise ConfigError(f"market: {e}") from None

    paths = simulate_market(mp, n_paths, cfg.tg, cfg.seed)
    hedge = wealth_process(u, paths)
    stagnation = stagnation_check(u, payoff, grid)
    delta = delta_hedge_residual(u, paths)

    rows = ["path,exit_step,exit_time,price_end,wealth_end"]
    for i in range(n_paths):
        rows.append(f"{i},{int(paths.exit_step[i])},"
                    f"{float(paths.exit_time[i])!r},"
                    f"{float(paths.prices[-1, i])!r},"
                    f"{float(hedge.wealth[-1, i])!r}")
    (out_dir / cfg.outputs["paths"]).write_text("\n".join(rows) + "\n")

    tolerance = cfg.solver["residual_tol"]
    breach = (rep.bc_residual > tolerance or stagnation > tolerance
              or not hedge.martingale.passed)
    code = (EXIT_BREACH if breach
            else EXIT_OK if rep.verdict.guaranteed else EXIT_NOT_GUARANTEED)
    report.update(rep.as_dict(), stagnation=stagnation,
                  martingale=hedge.martingale.as_dict(),
                  delta=delta.as_dict(), n_paths=n_paths, exit_code=code)
    report["artifacts"]["paths"] = cfg.outputs["paths"]
    _write_report(out_dir, cfg, report)
    print(f"verdict {rep.verdict.status.value} "
          f"(bc residual {rep.bc_residual:.3e})")
    print(f"stagnation residual {stagnation:.3e}; mean-wealth deviation "
          f"{hedge.martingale.max_deviation:.3e} "
          f"({'within' if hedge.martingale.passed else 'OUTSIDE'} 3 SE); "
          f"delta-hedge residual {delta.mean:.3e} +- {delta.sd:.3e}")
    return code


def run_probe(cfg: ExperimentConfig, ns, out_dir: Path) -> int:
    if cfg.kind != "probe":
        raise ConfigError("probe needs problem.kind = \"probe\"")
    psec = _section(cfg.raw, "probe")
    kappa = _num(psec, "probe", "kappa")
    n_paths = _num(psec, "probe", "n_paths", 0, integer=True,
                   lo=0, hi=_MAX_PATHS)
    n_checks = _num(psec, "probe", "checkpoints", 5, integer=True,
                    lo=2, hi=64)
    lo, hi = cfg.grid.lo[0], cfg.grid.hi[0]
    start = _num(psec, "probe", "start", (lo + hi) / 2.0)
    if not lo < start < hi:
        raise ConfigError(f"probe.start = {start} is not inside the domain")

    dres = duality_residual(cfg.coeffs, cfg.grid, cfg.tg, kappa,
                            theta=cfg.theta)
    report = _base_report(cfg, {})
    report.update(kappa=kappa, duality_residual=dres, martingale=None)

    passed = dres <= cfg.solver["residual_tol"]
    if n_paths:
        idx = np.unique(np.round(
            np.linspace(0.0, cfg.tg.steps, n_checks)).astype(int))
        times = [float(cfg.tg.knots[j]) for j in idx]
        sched = assemble_schedule(cfg.coeffs, cfg.grid, cfg.tg,
                                  form="nondivergence")
        u = solve_backward_cauchy(sched, cfg.tg, cfg.grid,
                                  _build_datum(cfg, cfg.grid),
                                  theta=cfg.theta)
        try:
            batch = fk_simulate(start, 0.0, cfg.coeffs, cfg.grid, cfg.tg,
                                n_paths, cfg.seed, record=[int(j) for j in idx])
        except ValueError as e:
            raise ConfigError(f"probe: {e}") from None
        mart = martingale_test(u, batch, times)
        report["martingale"] = mart.as_dict()
        passed = passed and mart.passed
        print(f"duality residual {dres:.3e}; mean deviation "
              f"{mart.max_deviation:.3e} "
              f"({'within' if mart.passed else 'OUTSIDE'} 3 SE)")
    else:
        print(f"duality residual {dres:.3e}")

    code = EXIT_OK if passed else EXIT_BREACH
    report["exit_code"] = code
    _write_report(out_dir, cfg, report)
    return code


def _eigen_error(values, grid, tg, *, axis, theta, kappa, mode, amp):
    """Sup-error of a level against the single-mode closed form."""
    lo, hi = grid.lo[0], grid.hi[0]
    span = hi - lo
    x = grid.nodes()[:, 0]
    shape = amp * np.sin(mode * math.pi * (x - lo) / span)
    lam_hat = -((mode * math.pi / span) ** 2)
    if axis == "time":
        h = span / (grid.shape[0] + 1)
        lam = -(4.0 / h**2) * math.sin(mode * math.pi * h / (2 * span)) ** 2
        profile = np.exp(lam * tg.knots)
        horizon_gain = math.exp(lam * tg.horizon)
    elif axis == "space":
        dt = tg.horizon / tg.steps
        rho = (1 + (1 - theta) * dt * lam_hat) / (1 - theta * dt * lam_hat)
        profile = rho ** np.arange(tg.steps + 1)
        horizon_gain = rho ** tg.steps
    else:
        profile = np.exp(lam_hat * tg.knots)
        horizon_gain = math.exp(lam_hat * tg.horizon)
    a0 = 1.0 / (1.0 - kappa * horizon_gain)
    oracle = a0 * profile[:, None] * shape[None, :]
    return float(np.max(np.abs(np.asarray(values) - oracle)))


def run_converge(cfg: ExperimentConfig, ns, out_dir: Path) -> int:
    if cfg.kind != "forward-pde":
        raise ConfigError("converge needs problem.kind = \"forward-pde\"")
    csec = _section(cfg.raw, "converge", required=False)
    levels = getattr(ns, "levels", None)
    levels = (_num(csec, "converge", "levels", 4, integer=True, lo=2, hi=10)
              if levels is None else int(levels))
    if not 2 <= levels <= 10:
        raise ConfigError(f"--levels = {levels} is outside [2, 10]")
    axis = getattr(ns, "axis", None) or csec.get("axis", "both")
    if axis not in ("both", "space", "time"):
        raise ConfigError("converge.axis must be both, space, or time")
    if not np.allclose(np.diff(cfg.tg.knots), cfg.tg.dt[0]):
        raise ConfigError("converge needs a uniform time grid")
    cond = _resolve_condition(cfg, ns)
    dsec = cfg.datum_sec
    if dsec.get("kind", "zero") != "sine":
        raise ConfigError("converge needs a sine datum")
    mode = _num(dsec, "datum", "mode", 1, integer=True, lo=1)
    amp = _num(dsec, "datum", "amplitude", 1.0)
    oracle = (cfg.heat_like and cond.kappa is not None
              and cond.direction == "forward")
    if not oracle and axis != "both":
        raise ConfigError("finest-level comparison needs axis = \"both\"")

    lo, hi = cfg.grid.lo[0], cfg.grid.hi[0]
    m0, k0 = cfg.interior, cfg.tg.steps
    n_runs = levels if oracle else levels + 1
    rows, errors, kept = [], [], []
    for level in range(n_runs):
        m = m0 if axis == "time" else (m0 + 1) * 2**level - 1
        k = k0 if axis == "space" else k0 * 2**level
        if m > _MAX_INTERIOR or k > _MAX_STEPS:
            raise ConfigError(
                f"refinement level {level} exceeds the size guards")
        grid_l = build_grid(((lo, hi),), (m,), allow_tiny=True)
        tg_l = TimeGrid.uniform(cfg.tg.horizon, k)
        problem = SpdeProblem(coeffs=cfg.coeffs, grid=grid_l, tg=tg_l,
                              form=cfg.form)
        xi = amp * np.sin(mode * math.pi
                          * (grid_l.nodes()[:, 0] - lo) / (hi - lo))
        sol, _ = solve_nonlocal(problem, cond, xi, theta=cfg.theta)
        if oracle:
            errors.append(_eigen_error(
                sol.values, grid_l, tg_l, axis=axis, theta=cfg.theta,
                kappa=cond.kappa, mode=mode, amp=amp))
        else:
            kept.append(np.asarray(sol.values))
        if level < levels:
            rows.append({"level": level, "interior": m, "steps": k,
                         "h": (hi - lo) / (m + 1),
                         "dt": cfg.tg.horizon / k})
    if not oracle:
        fine = kept[-1]
        for level in range(levels):
            step = 2 ** (levels - level)
            sub = fine[::step][:, step - 1::step]
            errors.append(float(np.max(np.abs(kept[level] - sub))))
    for row, err in zip(rows, errors):
        row["error"] = err
    orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])
              if b > 0.0]
    table = {"config": _echo(cfg.raw),
             "overrides": _overrides(ns, ("levels", "axis")),
             "axis": axis, "oracle": "eigen" if oracle else "finest",
             "rows": rows, "orders": orders,
             "observed_order": orders[-1] if orders else None}
    name = cfg.outputs["table"]
    (out_dir / name).write_text(
        json.dumps(_jsonify(table), sort_keys=True, indent=2) + "\n")
    print(f"{'level':>5} {'interior':>8} {'steps':>7} {'error':>12}")
    for row in rows:
        print(f"{row['level']:>5} {row['interior']:>8} {row['steps']:>7} "
              f"{row['error']:>12.4e}")
    if orders:
        print(f"observed order {orders[-1]:.3f} "
              f"(vs {'eigen oracle' if oracle else 'finest level'})")
    return EXIT_OK


def run_dump_lattice(cfg: ExperimentConfig, ns, out_dir: Path) -> int:
    try:
        lattice = build_lattice(cfg.tg, cfg.branches)
    except ValueError as e:
        raise ConfigError(f"lattice: {e}") from None
    name = cfg.outputs["lattice"]
    (out_dir / name).write_text(dump_lattice(lattice) + "\n")
    print(f"{cfg.tg.steps} steps, {cfg.branches} components, "
          f"{lattice.n_states(cfg.tg.steps)} leaf states -> {name}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="timemix",
                     description="parabolic solves with time-mixing boundary "
                                 "conditions, plus hedging and diagnostics")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True,
                        help="TOML or JSON experiment file")
        sp.add_argument("--out", default=".",
                        help="artifact directory (created if missing)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--threads", type=int, default=1,
                        help="accepted for interface stability; solvers use "
                             "a fixed decomposition, results never depend "
                             "on it")

    solve = sub.add_parser("solve", help="run a mixed-time boundary solve")
    common(solve)
    solve.add_argument("--direction", choices=("forward", "backward"))
    solve.add_argument("--kappa", help="endpoint weight (quasi-periodic form)")
    solve.add_argument("--kernel", help="CSV of time,weight kernel samples")
    solve.add_argument("--masses", help='point masses as "t:w,t:w,..."')
    solve.add_argument("--method", choices=("direct", "neumann"))
    solve.add_argument("--tol", help="fixed-point solve tolerance")

    hedge = sub.add_parser("hedge", help="barrier-corridor hedging experiment")
    common(hedge)
    hedge.add_argument("--method", choices=("direct", "neumann"))
    hedge.add_argument("--tol")

    probe = sub.add_parser("probe", help="duality and path-sampling checks")
    common(probe)

    conv = sub.add_parser("converge", help="refinement study with observed "
                                           "orders")
    common(conv)
    conv.add_argument("--levels", type=int)
    conv.add_argument("--axis", choices=("both", "space", "time"))

    dump = sub.add_parser("dump-lattice", help="write the noise-tree snapshot")
    common(dump)
    return parser


_RUNNERS = {
    "solve": run_solve,
    "hedge": run_hedge,
    "probe": run_probe,
    "converge": run_converge,
    "dump-lattice": run_dump_lattice,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if ns.threads is not None and ns.threads < 1:
            raise ConfigError("--threads must be at least 1")
        doc = load_config(Path(ns.config))
        cfg = parse_config(doc, Path(ns.config).resolve().parent, ns.seed)
        out_dir = Path(ns.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        return _RUNNERS[ns.command](cfg, ns, out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
