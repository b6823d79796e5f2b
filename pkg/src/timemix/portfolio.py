"""Two-factor barrier market with a stagnation-gain hedge.

One risky asset is driven by two Brownian factors, dS = S (sigma dw +
sigmat dwt) under a martingale measure, and is watched against barriers
(s_low, s_high): trading freezes at the first knot outside. The hedge target
is a payoff increment xi earned on the stagnation event: the claim value u
must satisfy u(., T) = u(., 0) + xi, i.e. the backward problem for the price
generator A = 1/2 (sigma^2 + sigmat^2) x^2 d^2/dx^2 with noise operator
B = sigma x d/dx and a quasi-periodic condition with unit weight. The wealth
process X(t) = u(S(t ^ tau), t ^ tau) is then checked to be flat in mean
across checkpoints (no zero-order term, so the weight is identically one).

Replication is verified through that martingale identity; the delta-hedge
residual is a labeled diagnostic only — with two drivers and one asset, no
pathwise replication by the stock alone is asserted.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .discretization import CoefficientSet, Field, Grid, TimeGrid
from .lattice import NoiseLattice
from .mixing import NonlocalCondition, solve_nonlocal
from .probe import (
    FkPathBatch,
    MartingaleReport,
    _interp_zero,
    martingale_test,
    path_values,
    snapped_states,
)
from .spde import SpdeProblem

_BARRIER_TOL = 1e-12


def _as_rate(v) -> Callable[[float], float]:
    if callable(v):
        return lambda t: float(v(t))
    x = float(v)
    return lambda t: x


@dataclass
class MarketParams:
    """Market description: barriers, volatilities, and the payoff increment.

    payoff is a callable on price levels (checked to vanish at the barriers),
    or a ready-made node array, (M,) deterministic or (S_K, M) per terminal
    lattice state. appreciation defaults to zero — the hedge solve requires
    it (martingale measure); a nonzero value only colors simulated paths.
    """

    spot: float
    s_low: float
    s_high: float
    horizon: float
    sigma: float | Callable[[float], float]
    sigma_tilde: float | Callable[[float], float]
    payoff: Callable | np.ndarray | None = None
    appreciation: float | Callable[[float], float] = 0.0

    def __post_init__(self):
        self.spot = float(self.spot)
        self.s_low = float(self.s_low)
        self.s_high = float(self.s_high)
        self.horizon = float(self.horizon)
        if not 0.0 < self.s_low < self.spot < self.s_high:
            raise ValueError("barrier levels must satisfy 0 < s_low < spot < s_high")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        for v in (self.sigma, self.sigma_tilde):
            if not callable(v) and float(v) < 0.0:
                raise ValueError("volatilities must be nonnegative")
        if callable(self.payoff):
            ends = np.asarray(self.payoff(np.array([self.s_low, self.s_high])), dtype=float)
            if np.max(np.abs(ends)) > _BARRIER_TOL:
                raise ValueError("payoff must vanish at the barriers")

    def sigma_at(self, t: float) -> float:
        return _as_rate(self.sigma)(t)

    def sigma_tilde_at(self, t: float) -> float:
        return _as_rate(self.sigma_tilde)(t)

    def appreciation_at(self, t: float) -> float:
        return _as_rate(self.appreciation)(t)

    def payoff_values(self, grid: Grid) -> np.ndarray:
        if self.payoff is None:
            raise ValueError("no payoff given")
        if callable(self.payoff):
            vals = np.asarray(self.payoff(grid.nodes()[:, 0]), dtype=float)
            if vals.shape != (grid.size,):
                raise ValueError(f"payoff must produce {grid.size} node values")
            return vals
        return np.asarray(self.payoff, dtype=float)


def market_coefficients(mp: MarketParams) -> CoefficientSet:
    """Price-process coefficients: b = 1/2 (sigma^2 + sigmat^2) x^2 with
    noise operator sigma x d/dx; already in non-divergence form (no drift,
    no zero-order term)."""
    sig = _as_rate(mp.sigma)
    sigt = _as_rate(mp.sigma_tilde)
    time_dep = callable(mp.sigma) or callable(mp.sigma_tilde)

    def b(X, t):
        s, st = sig(t), sigt(t)
        return 0.5 * (s * s + st * st) * X[:, 0] ** 2

    def beta(X, t):
        return sig(t) * X

    if callable(mp.sigma_tilde):
        worst = min(sigt(t) for t in np.linspace(0.0, mp.horizon, 101))
    else:
        worst = sigt(0.0)
    margin = 0.5 * worst * worst * mp.s_low**2
    return CoefficientSet(
        diffusion=Field(b, time_dependent=time_dep),
        noise_advection=(Field(beta, time_dependent=callable(mp.sigma)),),
        reaction_nondiv=Field(lambda X, t: np.zeros(X.shape[0])),
        coercivity_margin=margin,
    )


def solve_hedge_spde(mp: MarketParams, grid: Grid, tg: TimeGrid,
                     lattice: NoiseLattice | None = None, *,
                     method: str = "direct", tol: float = 1e-10):
    """Backward solve of the hedge problem u(., T) = u(., 0) + xi.

    Returns (solution, report); the solution carries the martingale part per
    step when a lattice is given. Requires a strictly positive coercivity
    margin (idiosyncratic volatility bounded away from zero) and the
    martingale measure (zero appreciation).
    """
    if callable(mp.appreciation) or mp.appreciation_at(0.0) != 0.0:
        raise ValueError("hedge construction requires zero appreciation "
                         "(martingale measure)")
    coeffs = market_coefficients(mp)
    if coeffs.coercivity_margin is None or coeffs.coercivity_margin <= 0.0:
        raise ValueError("coercivity margin must be positive: idiosyncratic "
                         "volatility may not vanish")
    if abs(grid.lo[0] - mp.s_low) > 1e-12 or abs(grid.hi[0] - mp.s_high) > 1e-12:
        raise ValueError("grid must span exactly the barrier interval")
    datum = mp.payoff_values(grid)
    prob = SpdeProblem(coeffs=coeffs, grid=grid, tg=tg, form="nondivergence")
    cond = NonlocalCondition.kappa_form("backward", 1.0)
    return solve_nonlocal(prob, cond, datum, lattice=lattice, theta=1.0,
                          method=method, tol=tol)


@dataclass
class MarketPaths:
    """Exact lognormal price paths with barrier freezing.

    prices[k] is the knot-k price per path (frozen at the first knot at or
    beyond a barrier); w_inc holds the named-driver increments for lattice
    snapping. One stream (default_rng(seed)), draws per step: w then the
    orthogonal factor, each a flat standard-normal vector.
    """

    tg: TimeGrid
    spot: float
    prices: np.ndarray       # (K+1, n)
    w_inc: np.ndarray        # (n, K, 1)
    exit_step: np.ndarray    # (n,)
    exit_time: np.ndarray    # (n,)
    n_paths: int
    seed: int

    def as_batch(self) -> FkPathBatch:
        K = self.tg.steps
        rec = np.arange(K + 1)
        cutoff = np.where(self.exit_step < 0, K + 1, self.exit_step)
        return FkPathBatch(
            tg=self.tg, start_index=0, x0=np.array([self.spot]), record=rec,
            states=self.prices[:, :, None], gammas=np.ones((K + 1, self.n_paths)),
            alive=rec[:, None] < cutoff[None, :], exit_step=self.exit_step,
            exit_time=self.exit_time, w_inc=self.w_inc, n_paths=self.n_paths,
            seed=self.seed)


def simulate_market(mp: MarketParams, n_paths: int, tg: TimeGrid, seed: int) -> MarketPaths:
    """Exact lognormal stepping of the price between knots.

    Each step multiplies by exp((a - (sigma^2 + sigmat^2)/2) dt + sigma dw +
    sigmat dwt) with rates from the left knot, so with zero appreciation the
    discrete prices form an exact martingale and optional stopping at the
    barrier time holds without discretization bias.
    """
    n = int(n_paths)
    rng = np.random.default_rng(int(seed))
    sig, sigt, app = (_as_rate(mp.sigma), _as_rate(mp.sigma_tilde),
                      _as_rate(mp.appreciation))
    K = tg.steps
    prices = np.empty((K + 1, n))
    prices[0] = mp.spot
    w_inc = np.zeros((n, K, 1))
    alive = np.ones(n, dtype=bool)
    exit_step = np.full(n, -1, dtype=int)
    for k in range(K):
        t = float(tg.knots[k])
        dt = float(tg.dt[k])
        sq = np.sqrt(dt)
        z1 = rng.standard_normal(n)
        z2 = rng.standard_normal(n)
        s, st, a = sig(t), sigt(t), app(t)
        w_inc[:, k, 0] = sq * z1
        grow = np.exp((a - 0.5 * (s * s + st * st)) * dt + s * sq * z1 + st * sq * z2)
        prices[k + 1] = np.where(alive, prices[k] * grow, prices[k])
        out = (prices[k + 1] <= mp.s_low) | (prices[k + 1] >= mp.s_high)
        newly = alive & out
        exit_step[newly] = k + 1
        alive = alive & ~newly
    exit_time = np.where(exit_step >= 0, tg.knots[np.maximum(exit_step, 0)], np.inf)
    return MarketPaths(tg=tg, spot=mp.spot, prices=prices, w_inc=w_inc,
                       exit_step=exit_step, exit_time=exit_time, n_paths=n,
                       seed=int(seed))


@dataclass
class DeltaHedgeStats:
    mean: float
    sd: float
    n: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "n": self.n}


@dataclass
class HedgeReport:
    martingale: MartingaleReport
    wealth: np.ndarray                    # (C, n) per-path wealth at checkpoints
    stagnation: float | None = None
    delta: DeltaHedgeStats | None = None

    def as_dict(self) -> dict:
        out = {"martingale": self.martingale.as_dict(),
               "stagnation_residual": self.stagnation}
        if self.delta is not None:
            out["delta_hedge"] = self.delta.as_dict()
        return out


def wealth_process(u, paths: MarketPaths, checkpoints=None) -> HedgeReport:
    """Wealth X(t) = u(S(t ^ tau), t ^ tau) along the paths, with the flatness
    report of its mean across checkpoints (all knots by default)."""
    batch = paths.as_batch()
    cps = batch.tg.knots if checkpoints is None else checkpoints
    rep = martingale_test(u, batch, cps)
    wealth = path_values(u, batch, cps)
    return HedgeReport(martingale=rep, wealth=wealth)


def stagnation_check(u, payoff, grid: Grid) -> float:
    """Max-abs of u(., T, leaf) - u(., 0) - xi over nodes and leaves."""
    xi = np.asarray(payoff(grid.nodes()[:, 0]) if callable(payoff) else payoff,
                    dtype=float)
    if hasattr(u, "state_mean"):
        u_end = np.asarray(u.values[-1])
        u_start = u.values[0][0]
    else:
        u_end = u.values[-1]
        u_start = u.values[0]
    return float(np.max(np.abs(u_end - u_start - xi)))


def _node_derivative(grid: Grid, node_values: np.ndarray) -> np.ndarray:
    """Spatial derivative at the nodes, zero wall values appended."""
    xp = np.concatenate(([grid.lo[0]], grid.axes()[0], [grid.hi[0]]))
    fp = np.concatenate(([0.0], node_values, [0.0]))
    return np.gradient(fp, xp)[1:-1]


def delta_hedge_residual(u, paths: MarketPaths) -> DeltaHedgeStats:
    """Terminal gap between the self-financing account traded at the
    interpolated spatial derivative of u and the claim value itself.

    Diagnostic only: with two drivers and a single asset nothing forces this
    residual toward zero, and no convergence is asserted.
    """
    batch = paths.as_batch()
    grid = u.grid
    stochastic = hasattr(u, "state_mean")
    n = batch.n_paths
    start_vals = u.values[0][0] if stochastic else u.values[0]
    account = np.full(n, float(_interp_zero(grid, start_vals, batch.x0[:1])[0]))
    for k in range(batch.tg.steps):
        sk = paths.prices[k]
        if stochastic:
            state = snapped_states(batch, k)
            delta = np.empty(n)
            for s_idx in np.unique(state):
                mask = state == s_idx
                delta[mask] = _interp_zero(
                    grid, _node_derivative(grid, u.values[k][s_idx]), sk[mask])
        else:
            delta = _interp_zero(grid, _node_derivative(grid, u.values[k]), sk)
        account += delta * (paths.prices[k + 1] - sk)
    terminal = path_values(u, batch, [batch.tg.horizon])[0]
    res = account - terminal
    sd = float(np.std(res, ddof=1)) if n > 1 else 0.0
    return DeltaHedgeStats(mean=float(np.mean(res)), sd=sd, n=n)
