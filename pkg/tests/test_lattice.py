"""Recombining binomial noise tree: probabilities, moments, martingale parts."""
from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timemix.discretization import TimeGrid
from timemix.lattice import (
    AdaptedField,
    build_lattice,
    conditional_expectation,
    dump_lattice,
    expectation,
    martingale_part,
    stochastic_integral,
)


def test_leaf_probabilities_binomial():
    lat = build_lattice(TimeGrid.uniform(1.0, 3), 1)
    p = lat.state_probs(3)
    assert np.array_equal(p, np.array([1, 3, 3, 1]) / 8.0)


def test_state_counts_two_components():
    lat = build_lattice(TimeGrid.uniform(1.0, 3), 2)
    assert [lat.n_states(k) for k in range(4)] == [1, 4, 9, 16]
    assert lat.up_counts(2).shape == (9, 2)


def test_increment_moments_exact():
    tg = TimeGrid(np.array([0.0, 0.1, 0.4, 1.0]))
    lat = build_lattice(tg, 2)
    for k in range(tg.steps):
        inc = lat.increments(k)  # (4, 2)
        assert inc.shape == (4, 2)
        # branch-uniform weights 1/4: mean zero, variance dt, components uncorrelated
        assert np.all(inc.mean(axis=0) == 0.0)
        assert np.all(np.abs((inc**2).mean(axis=0) - tg.dt[k]) <= 1e-15)
        assert (inc[:, 0] * inc[:, 1]).sum() == 0.0


def test_terminal_second_moment_equals_horizon():
    lat = build_lattice(TimeGrid.uniform(1.0, 4), 1)
    w = lat.wiener_values(4)[:, 0]
    p = lat.state_probs(4)
    assert abs(p @ w) <= 1e-15
    assert abs(p @ w**2 - 1.0) <= 1e-15


def test_tower_property():
    lat = build_lattice(TimeGrid.uniform(2.0, 3), 2)
    rng = np.random.default_rng(11)
    leaf = rng.standard_normal(lat.n_states(3))
    direct = expectation(lat, leaf, 3)
    vals = leaf
    for k in (2, 1, 0):
        vals = conditional_expectation(lat, vals, k)
    assert vals.shape == (1,)
    assert abs(vals[0] - direct) <= 1e-14


def test_iterated_integral_recombines_exactly():
    # discrete \int w dw: leaf value (w(T)^2 - T)/2, second moment sum t_m dt_m
    lat = build_lattice(TimeGrid.uniform(1.0, 4), 1)
    loads = [lat.wiener_values(k) for k in range(4)]
    integral, spread = stochastic_integral(lat, loads)
    assert spread <= 1e-14
    wT = lat.wiener_values(4)[:, 0]
    assert np.max(np.abs(integral.values[4] - (wT**2 - 1.0) / 2.0)) <= 1e-14
    second = expectation(lat, integral.values[4] ** 2, 4)
    assert abs(second - 0.375) <= 1e-14


def test_martingale_part_single_step():
    lat = build_lattice(TimeGrid.uniform(1.0, 1), 1)
    m, z = martingale_part(lat, np.array([-1.0, 1.0]), 0)
    assert m.shape == (1,) and z.shape == (1, 1)
    assert m[0] == 0.0
    assert z[0, 0] == 1.0


def test_martingale_part_cross_term():
    # u = dw1*dw2 has no linear part; reconstruction misses it by exactly dt
    lat = build_lattice(TimeGrid.uniform(1.0, 1), 2)
    w = lat.wiener_values(1)
    u = w[:, 0] * w[:, 1]
    m, z = martingale_part(lat, u, 0)
    assert m[0] == 0.0
    assert np.all(z == 0.0)
    ch = lat.children(0)[0]
    inc = lat.increments(0)
    resid = u[ch] - m[0] - inc @ z[0]
    assert np.max(np.abs(resid)) == 1.0


def test_affine_reconstruction_exact():
    lat = build_lattice(TimeGrid.uniform(1.0, 2), 2)
    c, a = 2.0, np.array([3.0, -1.5])
    u_next = c + lat.wiener_values(2) @ a
    m, z = martingale_part(lat, u_next, 1)
    assert np.max(np.abs(m - (c + lat.wiener_values(1) @ a))) <= 1e-14
    assert np.max(np.abs(z - a)) <= 1e-14
    ch = lat.children(1)
    inc = lat.increments(1)
    for s in range(lat.n_states(1)):
        resid = u_next[ch[s]] - m[s] - inc @ z[s]
        assert np.max(np.abs(resid)) <= 1e-14


def test_lattice_guard():
    with pytest.raises(ValueError):
        build_lattice(TimeGrid.uniform(1.0, 1000), 2)
    with pytest.raises(ValueError):
        build_lattice(TimeGrid.uniform(1.0, 4), 0)
    lat = build_lattice(TimeGrid.uniform(1.0, 2), 1)
    with pytest.raises(ValueError):
        AdaptedField(lat, [np.zeros(1), np.zeros(2), np.zeros(5)])


def test_wiener_values_need_uniform_steps():
    tg = TimeGrid(np.array([0.0, 0.25, 1.0]))
    lat = build_lattice(tg, 1)
    with pytest.raises(ValueError):
        lat.wiener_values(1)
    lat = build_lattice(TimeGrid.uniform(1.0, 2), 1)
    r = math.sqrt(0.5)
    assert np.allclose(lat.wiener_values(1), [[-r], [r]], rtol=0, atol=1e-15)


def test_children_mixed_radix():
    lat = build_lattice(TimeGrid.uniform(1.0, 2), 2)
    ch = lat.children(1)
    assert ch.shape == (4, 4)
    # state 2 at step 1 has up-counts (1, 0); branches land on a 3x3 level
    assert ch[2].tolist() == [3, 4, 6, 7]


def test_dump_is_canonical_json():
    lat = build_lattice(TimeGrid.uniform(1.0, 3), 1)
    s = dump_lattice(lat)
    obj = json.loads(s)
    assert obj["steps"] == 3
    assert obj["components"] == 1
    assert obj["levels"][3]["probs"] == [0.125, 0.375, 0.375, 0.125]
    assert s == json.dumps(obj, sort_keys=True, separators=(",", ":"))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_one_component_reconstruction_always_exact(vals):
    # two branch values, two coefficients: the linear fit interpolates
    lat = build_lattice(TimeGrid.uniform(1.0, 2), 1)
    u_next = np.asarray(vals)
    m, z = martingale_part(lat, u_next, 1)
    ch = lat.children(1)
    inc = lat.increments(1)
    for s in range(2):
        resid = u_next[ch[s]] - m[s] - inc @ z[s]
        assert np.max(np.abs(resid)) <= 1e-9 * (1.0 + np.max(np.abs(u_next)))
