"""Coefficient fields for the generator, drift, and noise operators.

A field is a callable (X, t) -> ndarray where X is an (M, dim) array of node
coordinates. Built-in shapes cover constants, affine functions and the
power-law coefficients of geometric Brownian motion; arbitrary per-node,
per-knot tables can be loaded from CSV.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

FieldFn = Callable[[np.ndarray, float], np.ndarray]


class Field:
    """Callable wrapper carrying sampling metadata.

    Attributes:
        time_dependent: False lets operator assembly reuse one matrix for
            every knot.
        node_bound: the sampler is only defined on grid nodes (tables); the
            divergence-form assembly then averages neighbours for midpoint
            values instead of evaluating off-node.
    """

    def __init__(self, fn: FieldFn, *, time_dependent: bool = False, node_bound: bool = False):
        self.fn = fn
        self.time_dependent = time_dependent
        self.node_bound = node_bound

    def __call__(self, X: np.ndarray, t: float) -> np.ndarray:
        return self.fn(X, t)


def constant_field(value: float, *, dim: int = 1, vector: bool = False) -> Field:
    """Constant scalar field, or a constant vector field along axis 0."""
    value = float(value)
    if vector:
        def fn(X, t):
            out = np.zeros((X.shape[0], X.shape[1]))
            out[:, 0] = value
            return out
    else:
        def fn(X, t):
            return np.full(X.shape[0], value)
    return Field(fn)


def affine_field(intercept: float, slopes: Sequence[float], *, vector: bool = False) -> Field:
    """intercept + slopes . x, as a scalar or an axis-0 vector field."""
    slopes = np.asarray(slopes, dtype=float)

    def scalar(X, t):
        return intercept + X[:, : slopes.size] @ slopes

    if vector:
        def fn(X, t):
            out = np.zeros_like(X)
            out[:, 0] = scalar(X, t)
            return out
        return Field(fn)
    return Field(scalar)


def power_field(factor: float, power: float, *, axis: int = 0, vector: bool = False) -> Field:
    """factor * x_axis**power; the shape of geometric-Brownian coefficients."""
    def scalar(X, t):
        return factor * X[:, axis] ** power

    if vector:
        def fn(X, t):
            out = np.zeros_like(X)
            out[:, axis] = scalar(X, t)
            return out
        return Field(fn)
    return Field(scalar)


def matrix_field(fn: FieldFn, *, time_dependent: bool = False) -> Field:
    """Wrap a (X, t) -> (M, dim, dim) sampler as a diffusion field."""
    return Field(fn, time_dependent=time_dependent)


def table_field(values: np.ndarray, knots: np.ndarray) -> Field:
    """Per-node, per-knot table: column k holds the field at knot k."""
    values = np.asarray(values, dtype=float)
    knots = np.asarray(knots, dtype=float)
    if values.ndim != 2 or values.shape[1] != knots.size:
        raise ValueError("table must be (nodes, knots)")

    def fn(X, t):
        j = int(np.argmin(np.abs(knots - t)))
        if abs(knots[j] - t) > 1e-12 * max(1.0, abs(knots[-1])):
            raise KeyError(f"table has no column for time {t}")
        col = values[:, j]
        if X.shape[0] != col.size:
            raise ValueError("table row count does not match the grid")
        return col

    return Field(fn, time_dependent=True, node_bound=True)


def load_table_csv(path, knots: np.ndarray) -> Field:
    """Read a (nodes x knots) CSV of decimal literals.

    Parsing goes through float(), which rounds each decimal literal to the
    nearest binary double, so repeated loads are bit-identical.
    """
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or all(not c.strip() for c in rec):
                continue
            rows.append([float(c) for c in rec])
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise ValueError(f"ragged CSV table in {path}")
    return table_field(np.array(rows), knots)


def _zeros_scalar(X, t):
    return np.zeros(X.shape[0])


def _zeros_vector(X, t):
    return np.zeros_like(X)


@dataclass
class CoefficientSet:
    """Coefficients of the drift operator and the noise operators.

    The drift operator in divergence form is
        sum_i d/dx_i ( sum_j b_ij dv/dx_j ) + f . grad v + c v,
    and each noise operator is  beta_i . grad v + beta0_i v.  The optional
    non-divergence fields describe the same drift operator written as
        sum_ij b_ij d2 v / dx_i dx_j + ft . grad v + ct v,
    which is the form the adjoint assembly and the sign conditions of the
    solvability certificates refer to.

    diffusion may return (M,), (M, 1, 1) or (M, dim, dim); scalars are
    promoted to isotropic matrices.
    """

    diffusion: FieldFn
    advection: FieldFn | None = None
    reaction: FieldFn | None = None
    noise_advection: tuple[FieldFn, ...] = ()
    noise_reaction: tuple[FieldFn, ...] = ()
    advection_nondiv: FieldFn | None = None
    reaction_nondiv: FieldFn | None = None
    coercivity_margin: float | None = None

    def __post_init__(self):
        self.noise_advection = tuple(self.noise_advection)
        self.noise_reaction = tuple(self.noise_reaction)
        if self.noise_reaction and len(self.noise_reaction) != len(self.noise_advection):
            raise ValueError("noise_reaction length must match noise_advection")

    @property
    def n_noise(self) -> int:
        return len(self.noise_advection)

    @property
    def time_dependent(self) -> bool:
        fields = [self.diffusion, self.advection, self.reaction,
                  self.advection_nondiv, self.reaction_nondiv,
                  *self.noise_advection, *self.noise_reaction]
        return any(getattr(f, "time_dependent", False) for f in fields if f is not None)

    # -- shape-normalising samplers ------------------------------------

    def sample_diffusion(self, X: np.ndarray, t: float) -> np.ndarray:
        """Diffusion matrix at each point, promoted to (M, dim, dim)."""
        raw = np.asarray(self.diffusion(X, t), dtype=float)
        M, dim = X.shape
        if raw.ndim == 0:
            raw = np.full(M, float(raw))
        if raw.ndim == 1:
            out = np.zeros((M, dim, dim))
            for a in range(dim):
                out[:, a, a] = raw
            return out
        if raw.shape == (M, dim, dim):
            asym = np.max(np.abs(raw - raw.transpose(0, 2, 1)))
            if asym > 1e-12:
                raise ValueError(f"diffusion matrix asymmetry {asym:.2e} exceeds 1e-12")
            return raw
        if raw.shape == (M, 1, 1) and dim == 1:
            return raw
        raise ValueError(f"diffusion sampler returned shape {raw.shape}")

    def sample_vector(self, which: FieldFn | None, X: np.ndarray, t: float) -> np.ndarray:
        if which is None:
            return _zeros_vector(X, t)
        out = np.asarray(which(X, t), dtype=float)
        if out.ndim == 1 and X.shape[1] == 1:
            out = out[:, None]
        if out.shape != X.shape:
            raise ValueError(f"vector sampler returned shape {out.shape}, expected {X.shape}")
        return out

    def sample_scalar(self, which: FieldFn | None, X: np.ndarray, t: float) -> np.ndarray:
        if which is None:
            return _zeros_scalar(X, t)
        out = np.asarray(which(X, t), dtype=float)
        if out.ndim == 0:
            out = np.full(X.shape[0], float(out))
        if out.shape != (X.shape[0],):
            raise ValueError(f"scalar sampler returned shape {out.shape}")
        return out

    # -- ready-made instances ------------------------------------------

    @classmethod
    def heat(cls, dim: int = 1) -> "CoefficientSet":
        """Unit diffusion, no drift, no reaction, no noise operator."""
        cs = cls(diffusion=constant_field(1.0))
        cs.advection_nondiv = None
        cs.reaction_nondiv = Field(_zeros_scalar)
        cs.coercivity_margin = 1.0
        return cs
