"""Verification instruments: adjoint marches, a duality check, and a
Feynman-Kac martingale probe.

Two independent ways to cross-examine a solve live here. The first is purely
algebraic: the backward theta step is the exact transpose of a forward march
with the adjoint operators (implicit part taken at the left knot), so the
response matrix of the mixing engine must agree with the weighted transpose of
the adjoint propagator to rounding. The second is probabilistic: along the
characteristics SDE dy = ft dt + sum_i beta_i dw_i + betat dwt (betat the
symmetric completion with betat betat^T = 2b - sum beta_i beta_i^T), the
weighted evaluation gamma(t ^ tau) u(y(t ^ tau), t ^ tau) with
gamma = exp(-int lambdat) is a martingale, so its Monte Carlo mean must stay
flat across checkpoints within sampling error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cauchy import Trajectory, _check_theta, _factor
from .discretization import CoefficientSet, Grid, TimeGrid, assemble_adjoint_ops
from .mixing import NonlocalCondition, mixing_response_matrix

_PSD_TOL = -1e-12
_RECORD_GUARD = 20_000_000
_N_CHUNKS = 8


def _adjoint_schedule(coeffs: CoefficientSet, grid: Grid, tg: TimeGrid) -> list:
    if not coeffs.time_dependent:
        op = assemble_adjoint_ops(coeffs, grid, float(tg.knots[0]))[0]
        return [op] * (tg.steps + 1)
    return [assemble_adjoint_ops(coeffs, grid, float(t))[0] for t in tg.knots]


def solve_adjoint_forward(rho, s: float, coeffs: CoefficientSet, grid: Grid,
                          tg: TimeGrid, *, theta: float = 1.0) -> Trajectory:
    """March the adjoint generator forward from p(s) = rho.

    The implicit operator sits at the left knot of each step (the mirror of
    the backward primal march), so the map rho -> p(T) is the exact transpose
    of the backward solution operator on the same knots. With noise operators
    present this is the deterministic mean of the adjoint field.
    """
    theta = _check_theta(theta)
    j0 = tg.knot_index(s)
    sched = _adjoint_schedule(coeffs, grid, tg)
    out = np.empty((tg.steps - j0 + 1, grid.size))
    out[0] = np.asarray(rho, dtype=float)
    for k in range(j0, tg.steps):
        dt = float(tg.dt[k])
        y = _factor(sched[k], theta * dt).solve(out[k - j0])
        if theta < 1.0:
            y = y + (1.0 - theta) * dt * (sched[k + 1].matrix @ y)
        out[k + 1 - j0] = y
    return Trajectory(tg=TimeGrid(tg.knots[j0:]), grid=grid, values=out)


def duality_residual(coeffs: CoefficientSet, grid: Grid, tg: TimeGrid,
                     kappa: float, *, theta: float = 1.0) -> float:
    """Relative Frobenius gap between the backward response matrix Q and the
    weighted transpose of the adjoint forward propagator scaled by kappa.

    Both sides are assembled in non-divergence form on the same knots, which
    is the regime where the gap is pure rounding.
    """
    theta = _check_theta(theta)
    cond = NonlocalCondition.kappa_form("backward", kappa)
    Q = mixing_response_matrix(cond, coeffs, grid, tg, theta=theta,
                               form="nondivergence")
    sched = _adjoint_schedule(coeffs, grid, tg)
    P = np.eye(grid.size)
    for k in range(tg.steps):
        dt = float(tg.dt[k])
        P = _factor(sched[k], theta * dt).solve(P)
        if theta < 1.0:
            P = P + (1.0 - theta) * dt * (sched[k + 1].matrix @ P)
    R = kappa * P
    w = np.full(grid.size, grid.weight)
    S = R.T * (w[None, :] / w[:, None])
    qn = float(np.linalg.norm(Q))
    if qn == 0.0:
        return 0.0
    return float(np.linalg.norm(Q - S) / qn)


@dataclass
class FkPathBatch:
    """Euler-Maruyama characteristics with exit freezing and gamma weights.

    states/gammas/alive are recorded at the knots listed in record (parent
    grid indices); exited paths stay frozen at their first outside state.
    w_inc keeps the increments of the named drivers w_i (not the completion
    drivers) when noise operators are present, for lattice snapping.
    """

    tg: TimeGrid
    start_index: int
    x0: np.ndarray
    record: np.ndarray       # (C,) parent knot indices
    states: np.ndarray       # (C, n, d)
    gammas: np.ndarray       # (C, n)
    alive: np.ndarray        # (C, n)
    exit_step: np.ndarray    # (n,) parent knot of first outside state, or -1
    exit_time: np.ndarray    # (n,) knot time, +inf when never exited
    w_inc: np.ndarray | None  # (n, K_s, N)
    n_paths: int
    seed: int


def _completion_increment(C: np.ndarray, dwt: np.ndarray) -> np.ndarray:
    """betat dwt with betat the symmetric PSD square root of C, per path."""
    if C.shape[1] == 1:
        c0 = C[:, 0, 0]
        if float(np.min(c0)) < _PSD_TOL:
            raise ValueError(
                f"coercivity violation: 2b - sum beta beta^T reaches {np.min(c0):.3e}")
        return (np.sqrt(np.clip(c0, 0.0, None)) * dwt[:, 0])[:, None]
    vals, vecs = np.linalg.eigh(C)
    if float(np.min(vals)) < _PSD_TOL:
        raise ValueError(
            f"coercivity violation: 2b - sum beta beta^T reaches {np.min(vals):.3e}")
    root = np.einsum("nik,nk,njk->nij", vecs, np.sqrt(np.clip(vals, 0.0, None)), vecs)
    return np.einsum("nij,nj->ni", root, dwt)


def fk_simulate(x, s: float, coeffs: CoefficientSet, grid: Grid, tg: TimeGrid,
                n_paths: int, seed: int, *, record=None) -> FkPathBatch:
    """Simulate the characteristics SDE from (x, s) to the horizon.

    Paths are split over 8 fixed counter-based streams (Philox keyed by
    [seed, chunk]) and reassembled in chunk order, so results are independent
    of any worker count. Exit is declared at the first knot strictly outside
    the closed box; gamma accumulates the zero-order rate by left rectangles.
    """
    x0 = np.atleast_1d(np.asarray(x, dtype=float))
    if x0.shape != (grid.dim,):
        raise ValueError(f"start point must have {grid.dim} coordinates")
    lo, hi = np.asarray(grid.lo, dtype=float), np.asarray(grid.hi, dtype=float)
    if np.any(x0 <= lo) or np.any(x0 >= hi):
        raise ValueError("start point must lie inside the open domain")
    if coeffs.advection is not None and coeffs.advection_nondiv is None:
        raise ValueError("non-divergence drift required: advection_nondiv is missing")
    if coeffs.reaction is not None and coeffs.reaction_nondiv is None:
        raise ValueError("non-divergence zero-order term required: reaction_nondiv is missing")
    j0 = tg.knot_index(s)
    K_s = tg.steps - j0
    if record is None:
        rec = np.arange(j0, tg.steps + 1)
    else:
        rec = np.asarray(sorted({int(r) for r in record}), dtype=int)
        if rec.size == 0 or rec[0] < j0 or rec[-1] > tg.steps:
            raise ValueError("record indices must be knots in [start, K]")
    if rec.size * n_paths * grid.dim > _RECORD_GUARD:
        raise ValueError("recorded states exceed the memory guard; pass a smaller record=")
    N = coeffs.n_noise
    d = grid.dim

    sizes = [n_paths // _N_CHUNKS + (1 if c < n_paths % _N_CHUNKS else 0)
             for c in range(_N_CHUNKS)]
    gens = [np.random.Generator(np.random.Philox(key=[seed, c]))
            for c in range(_N_CHUNKS)]

    y = np.tile(x0, (n_paths, 1))
    logw = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    exit_step = np.full(n_paths, -1, dtype=int)
    w_inc = np.zeros((n_paths, K_s, N)) if N > 0 else None

    rec_pos = {int(k): i for i, k in enumerate(rec)}
    states = np.empty((rec.size, n_paths, d))
    gammas = np.empty((rec.size, n_paths))
    alive_rec = np.empty((rec.size, n_paths), dtype=bool)

    def snapshot(knot: int) -> None:
        i = rec_pos.get(knot)
        if i is None:
            return
        states[i] = y
        gammas[i] = np.exp(logw)
        alive_rec[i] = alive

    snapshot(j0)
    for k in range(j0, tg.steps):
        t = float(tg.knots[k])
        dt = float(tg.dt[k])
        sq = np.sqrt(dt)
        dw = np.empty((n_paths, N)) if N > 0 else None
        dwt = np.empty((n_paths, d))
        off = 0
        for c, m in enumerate(sizes):
            if m == 0:
                continue
            if N > 0:
                dw[off:off + m] = gens[c].standard_normal((m, N))
            dwt[off:off + m] = gens[c].standard_normal((m, d))
            off += m
        if N > 0:
            w_inc[:, k - j0, :] = sq * dw

        ft = coeffs.sample_vector(coeffs.advection_nondiv, y, t)
        lam = coeffs.sample_scalar(coeffs.reaction_nondiv, y, t)
        b = coeffs.sample_diffusion(y, t)
        C = 2.0 * b
        dy = ft * dt
        for i in range(N):
            beta = coeffs.sample_vector(coeffs.noise_advection[i], y, t)
            C = C - np.einsum("ni,nj->nij", beta, beta)
            dy = dy + beta * (sq * dw[:, i])[:, None]
        dy = dy + _completion_increment(C, sq * dwt)

        y = np.where(alive[:, None], y + dy, y)
        logw = np.where(alive, logw - lam * dt, logw)
        out = np.any(y < lo, axis=1) | np.any(y > hi, axis=1)
        newly = alive & out
        exit_step[newly] = k + 1
        alive = alive & ~newly
        snapshot(k + 1)

    exit_time = np.where(exit_step >= 0,
                         tg.knots[np.maximum(exit_step, 0)], np.inf)
    return FkPathBatch(tg=tg, start_index=j0, x0=x0, record=rec, states=states,
                       gammas=gammas, alive=alive_rec, exit_step=exit_step,
                       exit_time=exit_time, w_inc=w_inc, n_paths=n_paths,
                       seed=int(seed))


def _interp_zero(grid: Grid, node_values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Linear interpolation on the node values, zero on and past the walls."""
    xp = np.concatenate(([grid.lo[0]], grid.axes()[0], [grid.hi[0]]))
    fp = np.concatenate(([0.0], node_values, [0.0]))
    return np.interp(x, xp, fp, left=0.0, right=0.0)


@dataclass
class MartingaleReport:
    times: np.ndarray
    means: np.ndarray
    ses: np.ndarray
    reference: float          # gamma(s) u(x0, s), computed from u directly
    deviations: np.ndarray    # |means - reference|
    bands: np.ndarray         # 3 * ses
    max_deviation: float
    passed: bool
    snap_delta: float | None  # stochastic u only: snapped vs mean-field gap

    def as_dict(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "means": [float(v) for v in self.means],
            "standard_errors": [float(v) for v in self.ses],
            "reference": self.reference,
            "max_deviation": self.max_deviation,
            "passed": self.passed,
            "snap_delta": self.snap_delta,
        }


def _positions(batch: FkPathBatch, checkpoints) -> tuple[list[float], list[tuple[int, int]]]:
    """Map checkpoint times to (parent knot, record row) pairs."""
    rec_pos = {int(k): i for i, k in enumerate(batch.record)}
    cps = [float(t) for t in np.atleast_1d(np.asarray(checkpoints, dtype=float))]
    positions = []
    for t in cps:
        try:
            k = batch.tg.knot_index(t)
        except KeyError:
            raise ValueError(f"checkpoint {t} is not a knot") from None
        if k not in rec_pos:
            raise ValueError(f"checkpoint {t} was not recorded in the batch")
        positions.append((k, rec_pos[k]))
    return cps, positions


def snapped_states(batch: FkPathBatch, knot: int) -> np.ndarray:
    """Lattice state per path at a parent knot: each driver increment snaps to
    the up branch when positive."""
    if batch.w_inc is None:
        raise ValueError("path batch has no driver increments to snap")
    lvl = knot - batch.start_index
    if lvl == 0:
        return np.zeros(batch.n_paths, dtype=int)
    counts = (batch.w_inc[:, :lvl, :] > 0.0).sum(axis=1)
    shape = (lvl + 1,) * batch.w_inc.shape[2]
    return np.ravel_multi_index(tuple(counts.T), shape)


def _check_compatible(u, batch: FkPathBatch) -> bool:
    """Validate u against the batch; returns whether u is stochastic."""
    if u.grid.dim != 1:
        raise ValueError("path evaluation of solutions is one-dimensional")
    stochastic = hasattr(u, "state_mean")
    utg = u.lattice.tg if stochastic else u.tg
    if not np.array_equal(utg.knots, batch.tg.knots):
        raise ValueError("solution and path batch use different knots")
    return stochastic


def _path_values(u, batch: FkPathBatch, positions) -> tuple[np.ndarray, np.ndarray | None]:
    """u along the recorded paths at each (knot, row): (C, n) values, plus the
    mean-field baseline for stochastic u (None otherwise)."""
    grid = u.grid
    stochastic = _check_compatible(u, batch)
    n = batch.n_paths
    vals = np.empty((len(positions), n))
    base = np.empty((len(positions), n)) if stochastic else None
    for row, (k, pos) in enumerate(positions):
        ys = batch.states[pos][:, 0]
        if stochastic:
            state = snapped_states(batch, k)
            for s_idx in np.unique(state):
                mask = state == s_idx
                vals[row, mask] = _interp_zero(grid, u.values[k][s_idx], ys[mask])
            base[row] = _interp_zero(grid, u.state_mean(k), ys)
        else:
            vals[row] = _interp_zero(grid, u.values[k], ys)
    return vals, base


def path_values(u, batch: FkPathBatch, checkpoints) -> np.ndarray:
    """Weighted evaluations gamma(t ^ tau) u(y(t ^ tau), t ^ tau): (C, n)."""
    _, positions = _positions(batch, checkpoints)
    vals, _ = _path_values(u, batch, positions)
    rows = np.array([pos for _, pos in positions])
    return batch.gammas[rows] * vals


def martingale_test(u, batch: FkPathBatch, checkpoints) -> MartingaleReport:
    """Check flatness of m(t) = E[gamma(t ^ tau) u(y(t ^ tau), t ^ tau)].

    u is a Trajectory or an SpdeSolution; exited paths contribute zero through
    the zero extension outside the walls. For stochastic u the path's w
    increments are snapped to lattice branches (positive -> up) to pick the
    state; the report's snap_delta compares that estimate against the
    mean-field baseline evaluated on the same paths.
    """
    grid = u.grid
    cps, positions = _positions(batch, checkpoints)
    stochastic = _check_compatible(u, batch)
    if stochastic:
        start_vals = u.values[batch.start_index][0]
    else:
        start_vals = u.values[batch.start_index]
    reference = float(_interp_zero(grid, start_vals, batch.x0[:1])[0])

    n = batch.n_paths
    all_vals, all_base = _path_values(u, batch, positions)
    means, ses, base_means = [], [], []
    for row, (k, pos) in enumerate(positions):
        g = batch.gammas[pos]
        contrib = g * all_vals[row]
        means.append(float(np.mean(contrib)))
        ses.append(float(np.std(contrib, ddof=1) / np.sqrt(n)) if n > 1 else 0.0)
        if stochastic:
            base_means.append(float(np.mean(g * all_base[row])))

    means = np.array(means)
    ses = np.array(ses)
    deviations = np.abs(means - reference)
    bands = 3.0 * ses
    snap_delta = float(np.max(np.abs(means - np.array(base_means)))) if stochastic else None
    return MartingaleReport(
        times=np.array(cps), means=means, ses=ses, reference=reference,
        deviations=deviations, bands=bands,
        max_deviation=float(np.max(deviations)),
        # degenerate checkpoints (all paths still at x0) have zero band but a
        # rounding-level mean; allow that much slack
        passed=bool(np.all(deviations <= bands + 1e-12)),
        snap_delta=snap_delta,
    )
