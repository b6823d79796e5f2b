"""Discrete norms on interior-node grid functions.

The base norm is the quadrature-weighted Euclidean norm; the first-order
energy adds forward-difference quotients (boundary faces included, with the
implicit zero boundary values), the second-order energy adds second-difference
quotients. The smoothing norm approximates the dual norm through one solve
with (I - Lap_h) and is meant for reports only.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grids import Grid
from .operators import second_diff

_lap_cache: dict[tuple, object] = {}


def h0_norm(grid: Grid, u: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(grid.weight * np.dot(u, u)))


def _forward_energy(grid: Grid, u: np.ndarray) -> float:
    """sum over axes and faces of (difference quotient)^2 * node weight."""
    field = np.asarray(u, dtype=float).reshape(grid.shape)
    total = 0.0
    for a in range(grid.dim):
        h = grid.h[a]
        pad = [(0, 0)] * grid.dim
        pad[a] = (1, 1)
        ext = np.pad(field, pad)
        d = np.diff(ext, axis=a) / h
        total += grid.weight * float(np.sum(d * d))
    return total


def _second_energy(grid: Grid, u: np.ndarray) -> float:
    field = np.asarray(u, dtype=float).reshape(grid.shape)
    total = 0.0
    for a in range(grid.dim):
        h = grid.h[a]
        pad = [(0, 0)] * grid.dim
        pad[a] = (1, 1)
        ext = np.pad(field, pad)
        dd = np.diff(ext, n=2, axis=a) / h**2
        total += grid.weight * float(np.sum(dd * dd))
    if grid.dim == 2:
        ext = np.pad(field, ((1, 1), (1, 1)))
        cross = (ext[2:, 2:] - ext[2:, :-2] - ext[:-2, 2:] + ext[:-2, :-2])
        cross /= 4.0 * grid.h[0] * grid.h[1]
        total += 2.0 * grid.weight * float(np.sum(cross * cross))
    return total


def h1_norm(grid: Grid, u: np.ndarray) -> float:
    return float(np.sqrt(h0_norm(grid, u) ** 2 + _forward_energy(grid, u)))


def h2_norm(grid: Grid, u: np.ndarray) -> float:
    return float(np.sqrt(h1_norm(grid, u) ** 2 + _second_energy(grid, u)))


def _smoother(grid: Grid):
    key = (grid.lo, grid.hi, grid.shape)
    if key not in _lap_cache:
        lap = sp.csr_matrix((grid.size, grid.size))
        for a in range(grid.dim):
            lap = lap + second_diff(grid, a)
        _lap_cache[key] = spla.factorized((sp.identity(grid.size, format="csc") - lap).tocsc())
    return _lap_cache[key]


def hneg1_norm(grid: Grid, u: np.ndarray) -> float:
    """|| (I - Lap_h)^(-1/2) u || in the weighted norm; reports only."""
    u = np.asarray(u, dtype=float)
    z = _smoother(grid)(u)
    val = grid.weight * float(np.dot(u, z))
    return float(np.sqrt(max(val, 0.0)))
