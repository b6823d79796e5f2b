"""Recombining binomial tree for the driving noise.

Each of the N noise components moves up or down by sqrt(dt_k) at every step,
all 2^N branch combinations carrying equal conditional probability. States are
identified by per-component up-counts, so level k holds (k+1)^N states with
exact dyadic probabilities (products of binomial weights). Conditional
expectations and the discrete martingale part of a one-step value are exact
branch averages; no sampling error enters anywhere on the tree.

Path functionals such as stochastic integrals are not functions of the state
in general. `stochastic_integral` pushes them forward anyway, merging the
paths that meet at a state by probability-weighted averaging and reporting the
largest value spread seen at any merge. A zero spread certifies that the
functional recombined exactly (e.g. integrating w against dw).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .discretization import TimeGrid

_MAX_STATES = 1_000_000


@dataclass(frozen=True)
class NoiseLattice:
    """Product binomial tree over the knots of a time grid."""

    tg: TimeGrid
    n_noise: int

    def n_states(self, k: int) -> int:
        return (k + 1) ** self.n_noise

    def level_shape(self, k: int) -> tuple[int, ...]:
        return (k + 1,) * self.n_noise

    @property
    def n_branches(self) -> int:
        return 2**self.n_noise

    @property
    def is_uniform(self) -> bool:
        dt = self.tg.dt
        return bool(np.all(np.abs(dt - dt[0]) <= 1e-12 * dt[0]))

    def up_counts(self, k: int) -> np.ndarray:
        """Per-component up-move counts of every state, shape (S_k, N)."""
        idx = np.unravel_index(np.arange(self.n_states(k)), self.level_shape(k))
        return np.stack(idx, axis=1)

    def branch_signs(self) -> np.ndarray:
        """All up/down combinations as +-1, shape (2^N, N), C-ordered."""
        bits = np.unravel_index(np.arange(self.n_branches), (2,) * self.n_noise)
        return np.stack(bits, axis=1) * 2.0 - 1.0

    def increments(self, k: int) -> np.ndarray:
        """Per-branch noise increments over step k, shape (2^N, N)."""
        return self.branch_signs() * math.sqrt(self.tg.dt[k])

    def children(self, k: int) -> np.ndarray:
        """Child state indices on level k+1, shape (S_k, 2^N)."""
        ups = self.up_counts(k)
        bits = (self.branch_signs() + 1.0) / 2.0
        multi = ups[:, None, :] + bits[None, :, :].astype(int)
        dims = self.level_shape(k + 1)
        return np.ravel_multi_index(
            tuple(multi[..., i] for i in range(self.n_noise)), dims
        )

    def state_probs(self, k: int) -> np.ndarray:
        """Exact probabilities of the level-k states."""
        ups = self.up_counts(k)
        if k * self.n_noise <= 900:  # comb and 2^-kN stay inside float range
            c = np.array([math.comb(k, j) for j in range(k + 1)], dtype=float)
            return np.prod(c[ups], axis=1) * 0.5 ** (k * self.n_noise)
        den = 1 << (k * self.n_noise)
        return np.array(
            [math.prod(math.comb(k, int(j)) for j in row) / den for row in ups]
        )

    def wiener_values(self, k: int) -> np.ndarray:
        """Noise values at the level-k states, shape (S_k, N).

        Up-counts determine the value only when every step has the same size,
        so this is defined for uniform grids alone.
        """
        if not self.is_uniform:
            raise ValueError("state values require a uniform time grid")
        step = self.tg.horizon / self.tg.steps
        return (2.0 * self.up_counts(k) - k) * math.sqrt(step)


def build_lattice(tg: TimeGrid, n_noise: int, max_states: int = _MAX_STATES) -> NoiseLattice:
    if n_noise < 1:
        raise ValueError("need at least one noise component")
    leaves = (tg.steps + 1) ** n_noise
    if leaves > max_states:
        raise ValueError(
            f"lattice would hold {leaves} terminal states (limit {max_states}); "
            "reduce the step count or the number of components"
        )
    return NoiseLattice(tg=tg, n_noise=int(n_noise))


@dataclass
class AdaptedField:
    """One scalar value per tree state, for every level."""

    lattice: NoiseLattice
    values: list[np.ndarray]

    def __post_init__(self):
        if len(self.values) != self.lattice.tg.steps + 1:
            raise ValueError("need one value array per level")
        vals = []
        for k, v in enumerate(self.values):
            v = np.asarray(v, dtype=float)
            if v.shape != (self.lattice.n_states(k),):
                raise ValueError(f"level {k} expects {self.lattice.n_states(k)} states")
            vals.append(v)
        self.values = vals


def conditional_expectation(lattice: NoiseLattice, values_next: np.ndarray, k: int) -> np.ndarray:
    """Expectation of level-(k+1) values given the level-k state."""
    ch = lattice.children(k)
    return np.asarray(values_next, dtype=float)[ch].mean(axis=1)


def expectation(lattice: NoiseLattice, values: np.ndarray, k: int) -> float:
    return float(lattice.state_probs(k) @ np.asarray(values, dtype=float))


def martingale_part(lattice: NoiseLattice, values_next: np.ndarray, k: int):
    """Split level-(k+1) values into predictable mean and noise loadings.

    Returns (m, z): m is the conditional expectation on level k, and z of
    shape (S_k, N) carries the discrete projections E[u dw_i | state] / dt_k,
    i.e. the coefficients of the best linear fit in the increments.
    """
    u = np.asarray(values_next, dtype=float)[lattice.children(k)]
    inc = lattice.increments(k)
    m = u.mean(axis=1)
    z = u @ inc / (lattice.n_branches * lattice.tg.dt[k])
    return m, z


def stochastic_integral(lattice: NoiseLattice, loads) -> tuple[AdaptedField, float]:
    """Forward-push the discrete integral sum_m loads_m . dw_m up the tree.

    `loads` holds one (S_k, N) array per step (left-endpoint sampling). Paths
    meeting at a state are merged by probability-weighted averaging; the
    returned spread is the largest max-min gap over all merges, zero when the
    integral is a true function of the state.
    """
    nb = lattice.n_branches
    vals = [np.zeros(1)]
    spread = 0.0
    for k in range(lattice.tg.steps):
        f = np.asarray(loads[k], dtype=float)
        if f.shape != (lattice.n_states(k), lattice.n_noise):
            raise ValueError(f"step {k} loads must have shape (S_k, {lattice.n_noise})")
        ch = lattice.children(k)
        drift = f @ lattice.increments(k).T  # (S_k, 2^N)
        p = lattice.state_probs(k) / nb
        s1 = lattice.n_states(k + 1)
        num = np.zeros(s1)
        den = np.zeros(s1)
        raw = np.zeros(s1)
        cnt = np.zeros(s1)
        mn = np.full(s1, np.inf)
        mx = np.full(s1, -np.inf)
        for b in range(nb):
            pv = vals[k] + drift[:, b]
            np.add.at(num, ch[:, b], p * pv)
            np.add.at(den, ch[:, b], p)
            np.add.at(raw, ch[:, b], pv)
            np.add.at(cnt, ch[:, b], 1.0)
            np.minimum.at(mn, ch[:, b], pv)
            np.maximum.at(mx, ch[:, b], pv)
        # fall back to the plain mean where the weights underflowed to zero
        safe = den > 0
        merged = np.where(safe, num / np.where(safe, den, 1.0), raw / cnt)
        spread = max(spread, float(np.max(mx - mn)))
        vals.append(merged)
    return AdaptedField(lattice, vals), spread


def dump_lattice(lattice: NoiseLattice) -> str:
    """Canonical JSON snapshot of levels, probabilities and state values."""
    levels = []
    for k in range(lattice.tg.steps + 1):
        level = {
            "step": k,
            "states": lattice.n_states(k),
            "probs": [float(p) for p in lattice.state_probs(k)],
            "wiener": (
                [[float(x) for x in row] for row in lattice.wiener_values(k)]
                if lattice.is_uniform
                else None
            ),
        }
        levels.append(level)
    payload = {
        "steps": lattice.tg.steps,
        "components": lattice.n_noise,
        "knots": [float(t) for t in lattice.tg.knots],
        "levels": levels,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))
