"""Two-factor barrier market, periodic hedge solve, and wealth diagnostics."""
from __future__ import annotations

import numpy as np
import pytest

from timemix.discretization import TimeGrid, build_grid
from timemix.lattice import build_lattice
from timemix.mixing import VerdictStatus
from timemix.portfolio import (
    MarketParams,
    delta_hedge_residual,
    market_coefficients,
    simulate_market,
    solve_hedge_spde,
    stagnation_check,
    wealth_process,
)


def default_payoff(x):
    return 0.01 * np.sin(np.pi * (x - 0.5) / 1.5)


def params(**kw):
    base = dict(spot=1.0, s_low=0.5, s_high=2.0, horizon=1.0,
                sigma=0.2, sigma_tilde=0.2, payoff=default_payoff)
    base.update(kw)
    return MarketParams(**base)


def hedge_ctx(m=15, steps=4):
    mp = params()
    grid = build_grid([(mp.s_low, mp.s_high)], (m,))
    tg = TimeGrid(np.linspace(0.0, mp.horizon, steps + 1))
    lattice = build_lattice(tg, 1)
    return mp, grid, tg, lattice


def test_params_validation():
    with pytest.raises(ValueError, match="barrier"):
        params(s_low=1.5)
    with pytest.raises(ValueError, match="barrier"):
        params(s_high=0.9)
    with pytest.raises(ValueError, match="vanish"):
        params(payoff=lambda x: np.sin(x))
    with pytest.raises(ValueError, match="horizon"):
        params(horizon=0.0)
    with pytest.raises(ValueError, match="volatilit"):
        params(sigma=-0.1)


def test_market_coefficients_structure():
    mp = params()
    coeffs = market_coefficients(mp)
    assert coeffs.n_noise == 1
    assert coeffs.coercivity_margin == pytest.approx(0.005, rel=1e-12)
    X = np.array([[1.0], [2.0]])
    b = coeffs.sample_diffusion(X, 0.0)
    assert b[0, 0, 0] == pytest.approx(0.5 * 0.08 * 1.0, rel=1e-12)
    assert b[1, 0, 0] == pytest.approx(0.5 * 0.08 * 4.0, rel=1e-12)
    beta = coeffs.sample_vector(coeffs.noise_advection[0], X, 0.0)
    assert beta[1, 0] == pytest.approx(0.4, rel=1e-12)
    assert not coeffs.time_dependent


def test_degenerate_idiosyncratic_vol_rejected():
    mp, grid, tg, lattice = hedge_ctx()
    mp = params(sigma_tilde=0.0)
    with pytest.raises(ValueError, match="coercivity"):
        solve_hedge_spde(mp, grid, tg, lattice)


def test_zero_payoff_zero_solution():
    mp, grid, tg, lattice = hedge_ctx(m=7, steps=3)
    mp = params(payoff=lambda x: np.zeros_like(x))
    sol, rep = solve_hedge_spde(mp, grid, tg, lattice)
    assert all(np.all(v == 0.0) for v in sol.values)
    assert rep.bc_residual == 0.0
    paths = simulate_market(mp, 500, tg, seed=4)
    hr = wealth_process(sol, paths)
    assert np.all(hr.wealth == 0.0)
    assert stagnation_check(sol, np.zeros(grid.size), grid) == 0.0


def test_hedge_small_instance():
    mp, grid, tg, lattice = hedge_ctx()
    sol, rep = solve_hedge_spde(mp, grid, tg, lattice)
    assert rep.verdict.status is VerdictStatus.GUARANTEED_KAPPA
    assert rep.bc_residual <= 1e-8
    xi = default_payoff(grid.nodes()[:, 0])
    assert stagnation_check(sol, xi, grid) <= 1e-8
    # periodic structure: terminal leaves differ from the initial state by xi
    for leaf in sol.values[-1]:
        assert np.max(np.abs(leaf - sol.values[0][0] - xi)) <= 1e-8


def test_hedge_linearity():
    mp, grid, tg, lattice = hedge_ctx(m=9, steps=3)
    sol1, _ = solve_hedge_spde(mp, grid, tg, lattice)
    mp2 = params(payoff=lambda x: 2.0 * default_payoff(x))
    sol2, _ = solve_hedge_spde(mp2, grid, tg, lattice)
    for k in range(tg.steps + 1):
        assert np.max(np.abs(sol2.values[k] - 2.0 * sol1.values[k])) <= 1e-10


def test_market_rng_layout_and_exactness():
    mp = params()
    tg = TimeGrid(np.linspace(0.0, 1.0, 5))
    n = 64
    paths = simulate_market(mp, n, tg, seed=9)
    rng = np.random.default_rng(9)
    z1 = rng.standard_normal(n)
    z2 = rng.standard_normal(n)
    v = 0.2**2 + 0.2**2
    want = 1.0 * np.exp((-0.5 * v) * 0.25 + 0.2 * 0.5 * z1 + 0.2 * 0.5 * z2)
    assert np.array_equal(paths.prices[1], want)
    assert np.array_equal(paths.w_inc[:, 0, 0], 0.5 * z1)


def test_market_optional_stopping():
    mp = params()
    tg = TimeGrid(np.linspace(0.0, 1.0, 9))
    n = 10000
    paths = simulate_market(mp, n, tg, seed=2)
    stopped = paths.prices[-1]
    se = float(np.std(stopped, ddof=1) / np.sqrt(n))
    assert abs(float(np.mean(stopped)) - mp.spot) <= 3.0 * se


def test_market_constant_when_vol_zero():
    mp = params(sigma=0.0, sigma_tilde=0.0)
    tg = TimeGrid(np.linspace(0.0, 1.0, 5))
    paths = simulate_market(mp, 16, tg, seed=0)
    assert np.all(paths.prices == 1.0)
    assert np.all(paths.exit_step == -1)
    assert np.all(np.isinf(paths.exit_time))


def test_market_exit_freeze_and_monotone_barriers():
    tight = params(s_low=0.9, s_high=1.1, sigma=0.5, sigma_tilde=0.5,
                   payoff=lambda x: np.zeros_like(x))
    wide = params(sigma=0.5, sigma_tilde=0.5, payoff=lambda x: np.zeros_like(x))
    tg = TimeGrid(np.linspace(0.0, 1.0, 9))
    pt = simulate_market(tight, 512, tg, seed=6)
    pw = simulate_market(wide, 512, tg, seed=6)
    exited = pt.exit_step >= 0
    assert exited.mean() > 0.5
    for p in np.nonzero(exited)[0][:40]:
        ke = pt.exit_step[p]
        assert np.all(pt.prices[ke:, p] == pt.prices[ke, p])
        assert pt.prices[ke, p] <= 0.9 or pt.prices[ke, p] >= 1.1
    assert (pw.exit_step >= 0).sum() <= exited.sum()


def test_wealth_flat_small_instance():
    mp, grid, tg, lattice = hedge_ctx(m=31, steps=8)
    sol, _ = solve_hedge_spde(mp, grid, tg, lattice)
    paths = simulate_market(mp, 20000, tg, seed=2)
    hr = wealth_process(sol, paths)
    assert hr.martingale.passed, (hr.martingale.deviations, hr.martingale.bands)
    assert hr.wealth.shape == (tg.steps + 1, 20000)
    assert hr.martingale.snap_delta is not None


def test_wealth_homogeneity():
    mp, grid, tg, lattice = hedge_ctx(m=9, steps=3)
    sol1, _ = solve_hedge_spde(mp, grid, tg, lattice)
    mp3 = params(payoff=lambda x: 3.0 * default_payoff(x))
    sol3, _ = solve_hedge_spde(mp3, grid, tg, lattice)
    paths = simulate_market(mp, 200, tg, seed=12)
    w1 = wealth_process(sol1, paths).wealth
    w3 = wealth_process(sol3, paths).wealth
    assert np.max(np.abs(w3 - 3.0 * w1)) <= 1e-10


def test_stagnation_random_leaf_payoff():
    mp, grid, tg, lattice = hedge_ctx(m=7, steps=3)
    rng = np.random.default_rng(5)
    xi = rng.standard_normal((lattice.n_states(tg.steps), grid.size)) * 0.01
    mp = params(payoff=xi)
    sol, rep = solve_hedge_spde(mp, grid, tg, lattice)
    assert rep.bc_residual <= 1e-8
    assert stagnation_check(sol, xi, grid) <= 1e-8


def test_delta_hedge_zero_payoff_exact():
    mp, grid, tg, lattice = hedge_ctx(m=7, steps=3)
    mp = params(payoff=lambda x: np.zeros_like(x))
    sol, _ = solve_hedge_spde(mp, grid, tg, lattice)
    paths = simulate_market(mp, 100, tg, seed=8)
    stats = delta_hedge_residual(sol, paths)
    assert stats.mean == 0.0 and stats.sd == 0.0


def test_delta_hedge_reports_statistics():
    mp, grid, tg, lattice = hedge_ctx(m=15, steps=4)
    sol, _ = solve_hedge_spde(mp, grid, tg, lattice)
    paths = simulate_market(mp, 2000, tg, seed=3)
    stats = delta_hedge_residual(sol, paths)
    assert np.isfinite(stats.mean) and np.isfinite(stats.sd)
    assert stats.sd >= 0.0
    assert stats.n == 2000
