"""Uniform tensor grids on intervals and rectangles, plus time knots.

Spatial unknowns live on interior nodes only; homogeneous Dirichlet values on
the boundary are implicit and never stored. Grids are uniform per axis with
spacing h = (hi - lo) / (n + 1).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_TINY_FLOOR = 1
_DEFAULT_FLOOR = 3


@dataclass(frozen=True)
class Grid:
    """Interior-node tensor grid in one or two dimensions.

    Attributes:
        lo: lower corner per axis.
        hi: upper corner per axis.
        shape: interior node count per axis.
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    shape: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def h(self) -> tuple[float, ...]:
        return tuple((b - a) / (n + 1) for a, b, n in zip(self.lo, self.hi, self.shape))

    @property
    def size(self) -> int:
        out = 1
        for n in self.shape:
            out *= n
        return out

    @property
    def weight(self) -> float:
        """Quadrature weight of one node (product of spacings)."""
        out = 1.0
        for s in self.h:
            out *= s
        return out

    def axes(self) -> list[np.ndarray]:
        """Interior coordinates along each axis."""
        return [
            a + s * np.arange(1, n + 1)
            for a, s, n in zip(self.lo, self.h, self.shape)
        ]

    def nodes(self) -> np.ndarray:
        """All interior nodes as an (M, dim) array in C order."""
        ax = self.axes()
        if self.dim == 1:
            return ax[0][:, None]
        X1, X2 = np.meshgrid(ax[0], ax[1], indexing="ij")
        return np.stack([X1.ravel(), X2.ravel()], axis=1)

    def flat_index(self, multi: tuple[int, ...]) -> int:
        return int(np.ravel_multi_index(multi, self.shape))


def build_grid(intervals, interior, *, allow_tiny: bool = False) -> Grid:
    """Validate and construct a Grid.

    Args:
        intervals: sequence of (lo, hi) pairs, one per axis (1 or 2 axes).
        interior: interior node count per axis, at least 3 each unless
            allow_tiny is set (desk-scale examples use a single node).
        allow_tiny: permit n >= 1 instead of n >= 3.
    """
    intervals = [tuple(map(float, iv)) for iv in intervals]
    interior = [int(n) for n in interior]
    if len(intervals) not in (1, 2):
        raise ValueError(f"dimension must be 1 or 2, got {len(intervals)}")
    if len(interior) != len(intervals):
        raise ValueError("interval and node-count lists disagree in length")
    floor = _TINY_FLOOR if allow_tiny else _DEFAULT_FLOOR
    for (a, b), n in zip(intervals, interior):
        if not (np.isfinite(a) and np.isfinite(b) and a < b):
            raise ValueError(f"degenerate interval ({a}, {b})")
        if n < floor:
            raise ValueError(f"need at least {floor} interior nodes per axis, got {n}")
    lo = tuple(iv[0] for iv in intervals)
    hi = tuple(iv[1] for iv in intervals)
    return Grid(lo=lo, hi=hi, shape=tuple(interior))


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time knots 0 = tau_0 < ... < tau_K = T."""

    knots: np.ndarray = field()

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", k)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("need at least two time knots")
        if k[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(k) <= 0):
            raise ValueError("time knots must be strictly increasing")

    @property
    def horizon(self) -> float:
        return float(self.knots[-1])

    @property
    def steps(self) -> int:
        return self.knots.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.knots)

    def knot_index(self, t: float, tol: float | None = None) -> int:
        """Index of the knot equal to t; KeyError when t is not a knot."""
        if tol is None:
            tol = 1e-12 * max(1.0, self.horizon)
        j = int(np.argmin(np.abs(self.knots - t)))
        if abs(self.knots[j] - t) > tol:
            raise KeyError(f"time {t} is not a knot of this grid")
        return j

    @classmethod
    def uniform(cls, horizon: float, steps: int) -> "TimeGrid":
        if steps < 1 or horizon <= 0:
            raise ValueError("horizon must be positive and steps >= 1")
        return cls(np.linspace(0.0, horizon, steps + 1))

    @classmethod
    def with_times(cls, horizon: float, steps: int, include=()) -> "TimeGrid":
        """Uniform grid refined so every time in `include` is a knot."""
        base = np.linspace(0.0, horizon, steps + 1)
        extra = [float(t) for t in include]
        for t in extra:
            if not 0.0 <= t <= horizon:
                raise ValueError(f"time {t} outside [0, {horizon}]")
        merged = np.union1d(base, extra)
        # drop near-duplicates introduced by roundoff
        keep = [merged[0]]
        tol = 1e-12 * max(1.0, horizon)
        for t in merged[1:]:
            if t - keep[-1] > tol:
                keep.append(t)
        return cls(np.asarray(keep))
