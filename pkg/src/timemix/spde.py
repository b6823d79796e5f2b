"""Theta stepping on the noise tree, forward and backward in time.

Forward runs treat the noise explicitly (Euler-Maruyama) and the drift by the
theta rule: from each tree state the step produces one value per branch, and
values meeting at a state are merged by probability-weighted averaging exactly
as in `lattice.stochastic_integral`, with the largest merge spread reported on
the solution. Expectations survive the merge exactly, so the state means of a
forward run reproduce the deterministic marcher to rounding whatever the noise
operators are.

Backward runs step conditional expectations, which are genuinely functions of
the state, so no merging (and no merge error) is involved: the one-step values
split into their predictable part and noise loadings z_i via exact branch
averages, and the drift solve is fully implicit. Implicit-only here: with the
loadings taken from the step ahead, theta < 1 would mix two different
filtrations on the explicit side.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cauchy import _check_theta, _factor, assemble_schedule
from .discretization import CoefficientSet, Field, Grid, TimeGrid
from .discretization.operators import assemble_noise_op
from .lattice import NoiseLattice


@dataclass
class SpdeProblem:
    """Drift/noise coefficients plus the data entering the right-hand side.

    noise_forcing holds one scalar field per driving component (the additive
    part of the noise term); leave it empty for purely multiplicative noise.
    """

    coeffs: CoefficientSet
    grid: Grid
    tg: TimeGrid
    forcing: Field | None = None
    noise_forcing: tuple[Field, ...] = ()
    form: str = "divergence"

    def __post_init__(self):
        self.noise_forcing = tuple(self.noise_forcing)


@dataclass
class SpdeSolution:
    """Per-state solution values on every tree level.

    martingale[k] has shape (S_k, N, M): the noise loadings of step k as seen
    from each level-k state. Backward runs fill it; forward runs leave None
    and report the largest path merge spread instead.
    """

    lattice: NoiseLattice
    grid: Grid
    values: list[np.ndarray]
    martingale: list[np.ndarray] | None = None
    merge_spread: float = 0.0

    def state_mean(self, k: int) -> np.ndarray:
        return self.lattice.state_probs(k) @ self.values[k]

    def values_csv(self) -> str:
        rows = ["step,state,node,value"]
        for k, level in enumerate(self.values):
            for s in range(level.shape[0]):
                for j in range(level.shape[1]):
                    rows.append(f"{k},{s},{j},{float(level[s, j])!r}")
        return "\n".join(rows) + "\n"

    def martingale_csv(self) -> str:
        if self.martingale is None:
            raise ValueError("this run carries no noise loadings")
        n = self.lattice.n_noise
        rows = ["step,state,node," + ",".join(f"z_{i + 1}" for i in range(n))]
        for k, z in enumerate(self.martingale):
            for s in range(z.shape[0]):
                for j in range(z.shape[2]):
                    tail = ",".join(f"{float(z[s, i, j])!r}" for i in range(n))
                    rows.append(f"{k},{s},{j},{tail}")
        return "\n".join(rows) + "\n"


def _validate(problem: SpdeProblem, lattice: NoiseLattice) -> None:
    n = lattice.n_noise
    if problem.coeffs.n_noise not in (0, n):
        raise ValueError(
            f"{problem.coeffs.n_noise} noise operators for {n} driving components"
        )
    if problem.noise_forcing and len(problem.noise_forcing) != n:
        raise ValueError("need one additive noise field per driving component")
    if not np.array_equal(lattice.tg.knots, problem.tg.knots):
        raise ValueError("lattice and problem disagree on the time grid")


def _noise_schedule(problem: SpdeProblem, t: float):
    """Noise operator matrices at time t (empty tuple when B = 0)."""
    if problem.coeffs.n_noise == 0:
        return ()
    return tuple(
        assemble_noise_op(problem.coeffs, problem.grid, i, t).matrix
        for i in range(problem.coeffs.n_noise)
    )


def solve_forward_spde(problem: SpdeProblem, lattice: NoiseLattice,
                       initial: np.ndarray, *, theta: float = 1.0) -> SpdeSolution:
    """March a deterministic datum up the tree."""
    theta = _check_theta(theta)
    _validate(problem, lattice)
    grid, tg, coeffs = problem.grid, problem.tg, problem.coeffs
    M, N, nb = grid.size, lattice.n_noise, lattice.n_branches
    init = np.asarray(initial, dtype=float)
    if init.shape != (M,):
        raise ValueError(f"initial datum must have shape ({M},)")
    sched = assemble_schedule(coeffs, grid, tg, form=problem.form)
    X = grid.nodes()
    stationary_B = not coeffs.time_dependent
    B_ops = _noise_schedule(problem, float(tg.knots[0])) if stationary_B else None

    vals: list[np.ndarray] = [init[None, :].copy()]
    spread = 0.0
    for k in range(tg.steps):
        dt = float(tg.dt[k])
        t_k = float(tg.knots[k])
        u = vals[k]  # (S_k, M)
        base = u.copy()
        if theta < 1.0:
            base += (1.0 - theta) * dt * (sched[k].matrix @ u.T).T
        if problem.forcing is not None:
            base += dt * coeffs.sample_scalar(problem.forcing, X, t_k)
        loads = np.zeros((N, u.shape[0], M))
        ops = B_ops if stationary_B else _noise_schedule(problem, t_k)
        for i, B in enumerate(ops):
            loads[i] += (B @ u.T).T
        for i, h in enumerate(problem.noise_forcing):
            loads[i] += coeffs.sample_scalar(h, X, t_k)
        inc = lattice.increments(k)  # (nb, N)
        ch = lattice.children(k)
        lu = _factor(sched[k + 1], theta * dt)
        p = lattice.state_probs(k) / nb
        s1 = lattice.n_states(k + 1)
        num = np.zeros((s1, M))
        den = np.zeros(s1)
        raw = np.zeros((s1, M))
        cnt = np.zeros(s1)
        mn = np.full((s1, M), np.inf)
        mx = np.full((s1, M), -np.inf)
        for b in range(nb):
            rhs = base + np.tensordot(inc[b], loads, axes=1)
            y = lu.solve(rhs.T).T
            np.add.at(num, ch[:, b], p[:, None] * y)
            np.add.at(den, ch[:, b], p)
            np.add.at(raw, ch[:, b], y)
            np.add.at(cnt, ch[:, b], 1.0)
            np.minimum.at(mn, ch[:, b], y)
            np.maximum.at(mx, ch[:, b], y)
        safe = den > 0
        merged = np.where(safe[:, None], num / np.where(safe, den, 1.0)[:, None],
                          raw / cnt[:, None])
        spread = max(spread, float(np.max(mx - mn)))
        vals.append(merged)
    return SpdeSolution(lattice=lattice, grid=grid, values=vals, merge_spread=spread)


def solve_backward_spde(problem: SpdeProblem, lattice: NoiseLattice,
                        terminal: np.ndarray) -> SpdeSolution:
    """March a terminal datum (one value per leaf state) down the tree."""
    _validate(problem, lattice)
    grid, tg, coeffs = problem.grid, problem.tg, problem.coeffs
    M, N, nb = grid.size, lattice.n_noise, lattice.n_branches
    K = tg.steps
    term = np.asarray(terminal, dtype=float)
    if term.shape == (M,):
        term = np.tile(term, (lattice.n_states(K), 1))
    if term.shape != (lattice.n_states(K), M):
        raise ValueError(f"terminal datum must be ({lattice.n_states(K)}, {M})")
    sched = assemble_schedule(coeffs, grid, tg, form=problem.form)
    X = grid.nodes()
    stationary_B = not coeffs.time_dependent
    B_ops = _noise_schedule(problem, float(tg.knots[0])) if stationary_B else None

    vals: list[np.ndarray] = [np.empty(0)] * (K + 1)
    mart: list[np.ndarray] = [np.empty(0)] * K
    vals[K] = term
    for k in range(K - 1, -1, -1):
        dt = float(tg.dt[k])
        t_k = float(tg.knots[k])
        ch = lattice.children(k)
        inc = lattice.increments(k)
        u1 = vals[k + 1][ch]  # (S_k, nb, M)
        m = u1.mean(axis=1)
        z = np.einsum("sbm,bi->sim", u1, inc) / (nb * dt)
        rhs = m.copy()
        if problem.forcing is not None:
            rhs += dt * coeffs.sample_scalar(problem.forcing, X, t_k)
        ops = B_ops if stationary_B else _noise_schedule(problem, t_k)
        for i, B in enumerate(ops):
            rhs += dt * (B @ z[:, i].T).T
        vals[k] = _factor(sched[k], dt).solve(rhs.T).T
        mart[k] = z
    return SpdeSolution(lattice=lattice, grid=grid, values=vals, martingale=mart)


def definition_residual(problem: SpdeProblem, lattice: NoiseLattice,
                        solution: SpdeSolution) -> float:
    """Largest violation of the backward scheme by the stored solution.

    Checks both the implicit drift equation at every state and the martingale
    reconstruction u_{k+1} = m + sum_i z_i dw_i along every branch. The second
    part is exact for one driving component and quantifies the unresolved
    cross terms otherwise.
    """
    if solution.martingale is None:
        raise ValueError("definition residual applies to backward runs")
    _validate(problem, lattice)
    grid, tg, coeffs = problem.grid, problem.tg, problem.coeffs
    X = grid.nodes()
    sched = assemble_schedule(coeffs, grid, tg, form=problem.form)
    worst = 0.0
    for k in range(tg.steps):
        dt = float(tg.dt[k])
        t_k = float(tg.knots[k])
        ch = lattice.children(k)
        inc = lattice.increments(k)
        u1 = solution.values[k + 1][ch]
        m = u1.mean(axis=1)
        z = solution.martingale[k]
        recon = u1 - m[:, None, :] - np.einsum("bi,sim->sbm", inc, z)
        worst = max(worst, float(np.max(np.abs(recon))))
        rhs = m.copy()
        if problem.forcing is not None:
            rhs += dt * coeffs.sample_scalar(problem.forcing, X, t_k)
        for i, B in enumerate(_noise_schedule(problem, t_k)):
            rhs += dt * (B @ z[:, i].T).T
        u = solution.values[k]
        lhs = u - dt * (sched[k].matrix @ u.T).T
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst
