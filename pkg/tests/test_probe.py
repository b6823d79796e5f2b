"""Adjoint/duality identities and the Feynman-Kac martingale probe."""
from __future__ import annotations

import numpy as np
import pytest

from timemix.cauchy import assemble_schedule, solve_backward_cauchy, solve_forward_cauchy
from timemix.discretization import (
    CoefficientSet,
    Field,
    TimeGrid,
    build_grid,
    constant_field,
)
from timemix.probe import (
    FkPathBatch,
    duality_residual,
    fk_simulate,
    martingale_test,
    solve_adjoint_forward,
)

PI = np.pi
RHO1 = PI**2 / (PI**2 + 8.0)


def heat_ctx(m=15, steps=8, horizon=1.0):
    grid = build_grid([(0.0, PI)], (m,), allow_tiny=m < 3)
    tg = TimeGrid(np.linspace(0.0, horizon, steps + 1))
    return CoefficientSet.heat(), grid, tg


def single_node_ctx(steps=1, horizon=1.0):
    return heat_ctx(m=1, steps=steps, horizon=horizon)


# -- adjoint forward equation ------------------------------------------------


def test_adjoint_zero_datum():
    coeffs, grid, tg = heat_ctx()
    p = solve_adjoint_forward(np.zeros(grid.size), 0.0, coeffs, grid, tg)
    assert np.all(p.values == 0.0)


def test_adjoint_heat_matches_forward_solve():
    # self-adjoint generator: the adjoint march reproduces the plain forward one
    coeffs, grid, tg = heat_ctx(m=15, steps=6)
    rho = np.sin(2.0 * grid.nodes()[:, 0])
    p = solve_adjoint_forward(rho, 0.0, coeffs, grid, tg, theta=1.0)
    sched = assemble_schedule(coeffs, grid, tg, form="nondivergence")
    ref = solve_forward_cauchy(sched, tg, grid, rho, theta=1.0)
    assert p.values.shape == ref.values.shape
    assert np.max(np.abs(p.values - ref.values)) <= 1e-13


def test_adjoint_single_node_decay():
    coeffs, grid, tg = single_node_ctx()
    p = solve_adjoint_forward(np.ones(1), 0.0, coeffs, grid, tg)
    want = 1.0 / (1.0 + 8.0 / PI**2)
    assert abs(p.values[-1, 0] - want) <= 1e-14


def test_adjoint_start_must_be_knot():
    coeffs, grid, tg = heat_ctx()
    with pytest.raises(KeyError):
        solve_adjoint_forward(np.zeros(grid.size), 0.123, coeffs, grid, tg)


# -- duality identity ---------------------------------------------------------


def test_duality_zero_kappa():
    coeffs, grid, tg = heat_ctx()
    assert duality_residual(coeffs, grid, tg, 0.0) == 0.0


def test_duality_single_node_exact():
    coeffs, grid, tg = single_node_ctx()
    assert duality_residual(coeffs, grid, tg, 0.8) == 0.0


def test_duality_heat():
    coeffs, grid, tg = heat_ctx(m=15, steps=8)
    assert duality_residual(coeffs, grid, tg, 0.5, theta=1.0) <= 1e-10
    assert duality_residual(coeffs, grid, tg, -1.0, theta=0.5) <= 1e-10


def test_duality_time_dependent_theta_half():
    # non-uniform knots and a time-varying zero-order term exercise the
    # knot alignment of the transposed march
    grid = build_grid([(0.0, PI)], (7,))
    tg = TimeGrid(np.array([0.0, 0.1, 0.3, 0.6, 0.8, 1.0]))
    coeffs = CoefficientSet(
        diffusion=constant_field(1.0),
        reaction_nondiv=Field(lambda X, t: -0.4 * (1.0 + t) * np.ones(X.shape[0]),
                              time_dependent=True),
    )
    assert duality_residual(coeffs, grid, tg, 0.7, theta=0.5) <= 1e-10


# -- Feynman-Kac batches -------------------------------------------------------


def test_fk_gamma_unit_without_zero_order_term():
    coeffs, grid, tg = heat_ctx(m=15, steps=4, horizon=0.01)
    batch = fk_simulate(PI / 2.0, 0.0, coeffs, grid, tg, n_paths=64, seed=3)
    assert np.all(batch.gammas == 1.0)


def test_fk_gamma_constant_rate():
    grid = build_grid([(0.0, PI)], (15,))
    tg = TimeGrid(np.linspace(0.0, 1.0, 5))
    coeffs = CoefficientSet(
        diffusion=constant_field(1.0),
        reaction_nondiv=Field(lambda X, t: 0.7 * np.ones(X.shape[0])),
    )
    batch = fk_simulate(PI / 2.0, 0.0, coeffs, grid, tg, n_paths=32, seed=5)
    # left-rectangle accumulation of a constant rate is the closed form,
    # on every path, exited or not
    for c, k in enumerate(batch.record):
        t = float(tg.knots[k])
        stopped = np.minimum(t, np.where(batch.exit_step >= 0,
                                         tg.knots[np.maximum(batch.exit_step, 0)],
                                         np.inf))
        want = np.exp(-0.7 * stopped)
        assert np.max(np.abs(batch.gammas[c] - want) / want) <= 1e-12


def test_fk_rng_layout_frozen():
    # one chunk-partitioned step: per-chunk Philox streams keyed [seed, chunk],
    # w draws before the completion draws
    grid = build_grid([(0.0, 20.0)], (9,))
    tg = TimeGrid(np.array([0.0, 0.25]))
    coeffs = CoefficientSet(
        diffusion=constant_field(1.0),
        noise_advection=(constant_field(0.0, vector=True),),
    )
    n = 11
    batch = fk_simulate(10.0, 0.0, coeffs, grid, tg, n_paths=n, seed=7)
    sizes = [n // 8 + (1 if c < n % 8 else 0) for c in range(8)]
    pieces = []
    for c, m in enumerate(sizes):
        if m == 0:
            continue
        g = np.random.Generator(np.random.Philox(key=[7, c]))
        g.standard_normal((m, 1))            # dw for the (zero) noise operator
        pieces.append(g.standard_normal((m, 1)))  # completion driver
    z = np.concatenate(pieces, axis=0)
    want = 10.0 + np.sqrt(2.0 * 0.25) * z[:, 0]
    assert np.array_equal(batch.states[-1][:, 0], want)
    assert batch.w_inc is not None and batch.w_inc.shape == (n, 1, 1)


def test_fk_exit_freezes_paths():
    grid = build_grid([(0.0, 0.2)], (7,))
    tg = TimeGrid(np.linspace(0.0, 1.0, 9))
    batch = fk_simulate(0.1, 0.0, CoefficientSet.heat(), grid, tg, n_paths=256, seed=1)
    exited = batch.exit_step >= 0
    assert exited.mean() > 0.5
    for p in np.nonzero(exited)[0]:
        ke = batch.exit_step[p]
        pos = int(np.searchsorted(batch.record, ke))
        later = batch.states[pos:, p, 0]
        assert np.all(later == later[0])
        assert np.all(batch.gammas[pos:, p] == batch.gammas[pos, p])
        x = batch.states[pos, p, 0]
        assert x < 0.0 or x > 0.2
    assert np.all(batch.exit_time[exited] == tg.knots[batch.exit_step[exited]])
    assert np.all(np.isinf(batch.exit_time[~exited]))


def test_fk_coercivity_violation():
    grid = build_grid([(0.0, 1.0)], (7,))
    tg = TimeGrid(np.linspace(0.0, 1.0, 3))
    coeffs = CoefficientSet(
        diffusion=constant_field(0.1),
        noise_advection=(constant_field(1.0, vector=True),),
    )
    with pytest.raises(ValueError, match="coercivity"):
        fk_simulate(0.5, 0.0, coeffs, grid, tg, n_paths=8, seed=0)


def test_fk_requires_nondivergence_drift():
    grid = build_grid([(0.0, 1.0)], (7,))
    tg = TimeGrid(np.linspace(0.0, 1.0, 3))
    coeffs = CoefficientSet(
        diffusion=constant_field(1.0),
        advection=constant_field(1.0, vector=True),
    )
    with pytest.raises(ValueError, match="non-divergence"):
        fk_simulate(0.5, 0.0, coeffs, grid, tg, n_paths=8, seed=0)


def test_fk_exit_fraction_vs_fine_oracle():
    # b = 1/2, no noise operators: the driver is a standard Brownian motion
    coeffs = CoefficientSet(diffusion=constant_field(0.5),
                            reaction_nondiv=Field(lambda X, t: np.zeros(X.shape[0])))
    grid = build_grid([(0.0, PI)], (15,))
    n = 20000
    coarse = fk_simulate(PI / 2.0, 0.0, coeffs, grid,
                         TimeGrid(np.linspace(0.0, 1.0, 257)),
                         n_paths=n, seed=11, record=[0, 256])
    fine = fk_simulate(PI / 2.0, 0.0, coeffs, grid,
                       TimeGrid(np.linspace(0.0, 1.0, 1025)),
                       n_paths=n, seed=99, record=[0, 1024])
    p1 = float((coarse.exit_step >= 0).mean())
    p2 = float((fine.exit_step >= 0).mean())
    se = np.sqrt(p1 * (1 - p1) / n + p2 * (1 - p2) / n)
    assert abs(p1 - p2) <= 3.0 * se


# -- martingale probe ----------------------------------------------------------


def test_martingale_constant_field_exact():
    coeffs, grid, tg = heat_ctx(m=15, steps=4, horizon=0.005)
    u = solve_backward_cauchy(assemble_schedule(coeffs, grid, tg), tg, grid,
                              2.0 * np.ones(grid.size))
    # backward heat from a constant is not constant, so overwrite: the probe
    # only sees the values
    u.values[:] = 2.0
    batch = fk_simulate(PI / 2.0, 0.0, coeffs, grid, tg, n_paths=512, seed=21)
    rep = martingale_test(u, batch, tg.knots)
    assert np.all(rep.means == 2.0)
    assert rep.reference == 2.0
    assert rep.max_deviation == 0.0
    assert rep.passed


def test_martingale_heat_backward_flat():
    grid = build_grid([(0.0, PI)], (127,))
    tg = TimeGrid(np.linspace(0.0, 0.25, 257))
    coeffs = CoefficientSet.heat()
    u = solve_backward_cauchy(assemble_schedule(coeffs, grid, tg), tg, grid,
                              np.sin(grid.nodes()[:, 0]))
    checkpoints = tg.knots[::32]
    batch = fk_simulate(PI / 2.0, 0.0, coeffs, grid, tg, n_paths=20000, seed=13,
                        record=[0] + list(range(32, 257, 32)))
    rep = martingale_test(u, batch, checkpoints)
    assert rep.reference == pytest.approx(float(u.values[0, 63]), abs=1e-12)
    assert rep.passed, (rep.deviations, rep.bands)
    assert rep.snap_delta is None


def test_martingale_checkpoint_off_grid():
    coeffs, grid, tg = heat_ctx(m=15, steps=4, horizon=0.01)
    u = solve_backward_cauchy(assemble_schedule(coeffs, grid, tg), tg, grid,
                              np.ones(grid.size))
    batch = fk_simulate(PI / 2.0, 0.0, coeffs, grid, tg, n_paths=16, seed=2)
    with pytest.raises(ValueError, match="checkpoint"):
        martingale_test(u, batch, [0.0037])


def test_martingale_snapped_stochastic():
    from timemix.lattice import build_lattice
    from timemix.spde import SpdeProblem, solve_backward_spde

    grid = build_grid([(0.0, PI)], (15,))
    tg = TimeGrid(np.linspace(0.0, 0.25, 5))
    coeffs = CoefficientSet(
        diffusion=constant_field(1.0),
        reaction_nondiv=Field(lambda X, t: np.zeros(X.shape[0])),
        noise_advection=(Field(lambda X, t: 0.2 * np.sin(X)),),
    )
    lattice = build_lattice(tg, 1)
    prob = SpdeProblem(coeffs=coeffs, grid=grid, tg=tg)
    sol = solve_backward_spde(prob, lattice, np.sin(grid.nodes()[:, 0]))
    batch = fk_simulate(PI / 2.0, 0.0, coeffs, grid, tg, n_paths=4000, seed=17)
    rep = martingale_test(sol, batch, tg.knots)
    assert rep.snap_delta is not None and np.isfinite(rep.snap_delta)
    assert rep.means.shape == (5,)
    assert np.all(rep.ses[1:] > 0.0)
    assert abs(rep.means[-1] - rep.reference) <= 0.05
