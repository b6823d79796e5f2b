"""Deterministic parabolic solves with a datum at one end of the horizon.

Time stepping is the one-parameter theta scheme on a shared knot grid,

    (I - theta dt A) u_next = (I + (1-theta) dt A) u_here + dt phi,

marched forward from an initial datum or backward from a terminal one. The
implicit side always samples the operator at the knot being solved for in the
forward direction and at the left knot in the backward direction, which makes
a backward sweep the exact algebraic transpose of a forward adjoint sweep on
the same schedule. Factorizations are cached on the operator objects keyed by
theta * dt, so repeated solves on one schedule (propagator columns, nonlocal
fixed points) reuse them.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import (
    CoefficientSet,
    Grid,
    OperatorMatrix,
    TimeGrid,
    assemble_generator,
    h0_norm,
    h1_norm,
    h2_norm,
    hneg1_norm,
)

_PROPAGATOR_GUARD = 4096


@dataclass
class Trajectory:
    """Knot-indexed grid functions: values[k] is the state at knots[k]."""

    tg: TimeGrid
    grid: Grid
    values: np.ndarray  # (K+1, M)

    def to_csv(self, path) -> None:
        """Rows (knot,time,node,value) in deterministic knot-major order."""
        buf = io.StringIO()
        buf.write("knot,time,node,value\n")
        for k, t in enumerate(self.tg.knots):
            for j, v in enumerate(self.values[k]):
                buf.write(f"{k},{float(t)!r},{j},{float(v)!r}\n")
        with open(path, "w") as fh:
            fh.write(buf.getvalue())


def assemble_schedule(coeffs: CoefficientSet, grid: Grid, tg: TimeGrid, *,
                      form: str = "divergence") -> list[OperatorMatrix]:
    """One assembled operator per knot; stationary coefficients share one."""
    if not coeffs.time_dependent:
        op = assemble_generator(coeffs, grid, float(tg.knots[0]), form=form)
        return [op] * (tg.steps + 1)
    return [assemble_generator(coeffs, grid, float(t), form=form) for t in tg.knots]


def _factor(op: OperatorMatrix, shift: float):
    """LU of (I - shift * A), cached on the operator object."""
    cache = getattr(op, "_factor_cache", None)
    if cache is None:
        cache = {}
        op._factor_cache = cache
    key = float(shift)
    if key not in cache:
        mat = (sp.identity(op.shape[0], format="csc") - shift * op.matrix).tocsc()
        cache[key] = spla.splu(mat)
    return cache[key]


def _check_theta(theta: float) -> float:
    theta = float(theta)
    if not 0.5 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0.5, 1], got {theta}")
    return theta


def _normalize_forcing(forcing, steps: int, size: int) -> np.ndarray | None:
    if forcing is None:
        return None
    arr = np.asarray(forcing, dtype=float)
    if arr.shape != (steps + 1, size):
        raise ValueError(f"forcing must be (K+1, M) = {(steps + 1, size)}, got {arr.shape}")
    return arr


def solve_forward_cauchy(schedule: list[OperatorMatrix], tg: TimeGrid, grid: Grid,
                         initial: np.ndarray, forcing=None, theta: float = 1.0) -> Trajectory:
    """March an initial datum forward through the theta scheme."""
    theta = _check_theta(theta)
    phi = _normalize_forcing(forcing, tg.steps, grid.size)
    out = np.empty((tg.steps + 1, grid.size))
    out[0] = np.asarray(initial, dtype=float)
    for k in range(tg.steps):
        dt = tg.dt[k]
        rhs = out[k].copy()
        if theta < 1.0:
            rhs += (1.0 - theta) * dt * (schedule[k].matrix @ out[k])
        if phi is not None:
            rhs += dt * phi[k]
        out[k + 1] = _factor(schedule[k + 1], theta * dt).solve(rhs)
    return Trajectory(tg=tg, grid=grid, values=out)


def solve_backward_cauchy(schedule: list[OperatorMatrix], tg: TimeGrid, grid: Grid,
                          terminal: np.ndarray, forcing=None, theta: float = 1.0) -> Trajectory:
    """March a terminal datum backward through the theta scheme."""
    theta = _check_theta(theta)
    phi = _normalize_forcing(forcing, tg.steps, grid.size)
    out = np.empty((tg.steps + 1, grid.size))
    out[tg.steps] = np.asarray(terminal, dtype=float)
    for k in range(tg.steps - 1, -1, -1):
        dt = tg.dt[k]
        rhs = out[k + 1].copy()
        if theta < 1.0:
            rhs += (1.0 - theta) * dt * (schedule[k + 1].matrix @ out[k + 1])
        if phi is not None:
            rhs += dt * phi[k]
        out[k] = _factor(schedule[k], theta * dt).solve(rhs)
    return Trajectory(tg=tg, grid=grid, values=out)


def propagator_matrix(schedule: list[OperatorMatrix], tg: TimeGrid, grid: Grid, *,
                      direction: str = "forward", theta: float = 1.0) -> np.ndarray:
    """Dense endpoint map of the homogeneous solve (datum -> far endpoint).

    Column j is the far-endpoint value of the solve with unit datum e_j and no
    forcing. Guarded to grids of at most 4096 unknowns.
    """
    theta = _check_theta(theta)
    M = grid.size
    if M > _PROPAGATOR_GUARD:
        raise ValueError(f"dense propagator refused for M={M} > {_PROPAGATOR_GUARD}")
    cur = np.eye(M)
    if direction == "forward":
        for k in range(tg.steps):
            dt = tg.dt[k]
            rhs = cur if theta == 1.0 else cur + (1.0 - theta) * dt * (schedule[k].matrix @ cur)
            cur = _factor(schedule[k + 1], theta * dt).solve(rhs)
        return cur
    if direction == "backward":
        for k in range(tg.steps - 1, -1, -1):
            dt = tg.dt[k]
            rhs = cur if theta == 1.0 else cur + (1.0 - theta) * dt * (schedule[k + 1].matrix @ cur)
            cur = _factor(schedule[k], theta * dt).solve(rhs)
        return cur
    raise ValueError(f"unknown direction {direction!r}")


@dataclass
class EnergyReport:
    lhs: float
    rhs: float
    ratio: float


def _report(lhs: float, rhs: float) -> EnergyReport:
    return EnergyReport(lhs=lhs, rhs=rhs, ratio=(lhs / rhs) if rhs > 0.0 else 0.0)


def energy_report_first(traj: Trajectory, forcing=None, datum=None) -> EnergyReport:
    """First energy bound: sup-norm plus first-order dissipation vs data.

    lhs = max_k |u_k|_0^2 + sum_k dt_k |u_k|_1^2,
    rhs = |datum|_0^2 + sum_k dt_k |phi_k|_{-1}^2; ratio 0 for zero data.
    """
    g, tg = traj.grid, traj.tg
    if datum is None:
        datum = traj.values[0]
    lhs = max(h0_norm(g, v) ** 2 for v in traj.values)
    lhs += sum(tg.dt[k] * h1_norm(g, traj.values[k]) ** 2 for k in range(tg.steps))
    rhs = h0_norm(g, datum) ** 2
    if forcing is not None:
        phi = np.asarray(forcing, dtype=float)
        rhs += sum(tg.dt[k] * hneg1_norm(g, phi[k]) ** 2 for k in range(tg.steps))
    return _report(lhs, rhs)


def energy_report_second(traj: Trajectory, forcing=None, datum=None) -> EnergyReport:
    """Second energy bound: one order smoother on both sides."""
    g, tg = traj.grid, traj.tg
    if datum is None:
        datum = traj.values[0]
    lhs = max(h1_norm(g, v) ** 2 for v in traj.values)
    lhs += sum(tg.dt[k] * h2_norm(g, traj.values[k]) ** 2 for k in range(tg.steps))
    rhs = h1_norm(g, datum) ** 2
    if forcing is not None:
        phi = np.asarray(forcing, dtype=float)
        rhs += sum(tg.dt[k] * h0_norm(g, phi[k]) ** 2 for k in range(tg.steps))
    return _report(lhs, rhs)
