from __future__ import annotations

import numpy as np
import pytest

from ezstab.errors import ParameterError
from ezstab.market import black_scholes, minimal_spd_path
from ezstab.paths import (
    ConsumptionStream, RatioPolicy, TimeGrid, clock_integral, cumulative_clock_integral, dump_bundle,
    load_bundle, make_bundle, simulate_wealth,
)


def test_grid_kappa_mass():
    for T, n in [(1.0, 50), (2.5, 7), (0.3, 1)]:
        g = TimeGrid(T, n)
        assert g.kappa_weights.sum() == pytest.approx(T + 1.0, abs=1e-12)
        assert g.kappa_weights[1:-1] == pytest.approx(np.full(n - 1, g.dt)) if n > 1 else True
        assert g.kappa_weights[-1] == pytest.approx(1.0 + 0.5 * g.dt)


def test_grid_rejects_bad_input():
    with pytest.raises(ParameterError):
        TimeGrid(0.0, 10)
    with pytest.raises(ParameterError):
        TimeGrid(1.0, 0)


def test_bundle_is_deterministic(grid50):
    a = make_bundle(5, 100, grid50, 2)
    b = make_bundle(5, 100, grid50, 2)
    assert np.array_equal(a.increments, b.increments)
    c = make_bundle(6, 100, grid50, 2)
    assert not np.array_equal(a.increments, c.increments)


def test_bundle_paths_independent_of_count(grid50):
    small = make_bundle(5, 10, grid50, 1)
    large = make_bundle(5, 100, grid50, 1)
    assert np.array_equal(small.increments, large.increments[:10])


def test_antithetic_halves_cancel(grid50):
    b = make_bundle(3, 200, grid50, 1, antithetic=True)
    assert np.all(b.increments[:100] + b.increments[100:] == 0.0)


def test_increment_moments(grid50):
    b = make_bundle(9, 10_000, grid50, 1)
    inc = b.increments[..., 0]
    n = inc.shape[0]
    dt = grid50.dt
    mean_se = np.sqrt(dt / n)
    var_se = dt * np.sqrt(2.0 / n)
    assert np.all(np.abs(inc.mean(axis=0)) < 5 * mean_se)
    assert np.all(np.abs(inc.var(axis=0, ddof=1) - dt) < 5 * var_se)


def test_bundle_round_trip(tmp_path, grid50):
    b = make_bundle(4, 20, grid50, 2, antithetic=True)
    dump_bundle(b, tmp_path / "b.bin")
    c = load_bundle(tmp_path / "b.bin")
    assert np.array_equal(b.increments, c.increments)
    assert (c.seed, c.n_paths, c.dim, c.antithetic, c.grid.T, c.grid.n_steps) == (4, 20, 2, True, 1.0, 50)


def test_riskless_growth(grid50):
    m = black_scholes(0.03, 0.04, 0.2)
    b = make_bundle(1, 5, grid50, 1)
    c = ConsumptionStream(np.zeros((1, 51)))
    w = simulate_wealth(m, 0.0, c, 2.0, b)
    assert np.allclose(w.values, 2.0 * np.exp(0.03 * grid50.nodes), rtol=1e-13, atol=0)
    assert np.all(w.riskless_weight == 1.0)


def test_linear_drain(grid50):
    m = black_scholes(0.0, 0.04, 0.2)
    b = make_bundle(1, 3, grid50, 1)
    c = ConsumptionStream.constant(0.3, grid50, 3)
    w = simulate_wealth(m, 0.0, c, 1.0, b)
    assert np.allclose(w.values[:, :-1], 1.0 - 0.3 * grid50.nodes[:-1], atol=1e-13)
    assert np.allclose(w.values[:, -1], 1.0 - 0.3 - 0.3, atol=1e-13)
    assert w.admissible


def test_overconsumption_flags_inadmissible(grid50):
    m = black_scholes(0.0, 0.0, 0.2)
    b = make_bundle(1, 4, grid50, 1)
    w = simulate_wealth(m, 0.0, ConsumptionStream.constant(2.0, grid50, 4), 1.0, b)
    assert not w.admissible
    assert w.violating_fraction == 1.0


def test_budget_identity_under_minimal_spd(grid50):
    m = black_scholes(0.02, 0.04, 0.2)
    b = make_bundle(2, 10_000, grid50, 1)
    D = minimal_spd_path(m, b)
    w = simulate_wealth(m, 0.4, RatioPolicy(np.full(51, 0.3)), 1.0, b)
    spent = clock_integral(D * w.consumption.rates(), b.grid, atom=D[:, -1] * w.consumption.lump)
    se = spent.std(ddof=1) / np.sqrt(spent.size)
    assert spent.mean() <= 1.0 + 2 * se


def test_weak_error_geometric():
    g = TimeGrid(1.0, 100)
    b = make_bundle(8, 10_000, g, 1)
    m = black_scholes(0.02, 0.04, 0.2)
    w = simulate_wealth(m, 0.6, ConsumptionStream(np.zeros((1, 101))), 1.0, b)
    xt = w.values[:, -1]
    exact = np.exp(0.02 + 0.6 * 0.04)
    assert abs(xt.mean() - exact) < 3 * xt.std(ddof=1) / np.sqrt(xt.size)


def test_clock_integral_examples():
    g = TimeGrid(1.0, 40)
    assert clock_integral(np.ones((2, 41)), g) == pytest.approx([2.0, 2.0])
    v = g.nodes.copy()
    assert clock_integral(v[None], g, atom=1.0)[0] == pytest.approx(1.5, abs=1e-12)


def test_clock_integral_refinement():
    def dt_part(n):
        g = TimeGrid(1.0, n)
        return clock_integral(np.exp(g.nodes)[None], g, atom=0.0)[0]

    exact = np.e - 1.0
    e1, e2 = abs(dt_part(20) - exact), abs(dt_part(40) - exact)
    assert e1 / e2 == pytest.approx(4.0, rel=0.05)


def test_cumulative_clock_integral_ends_at_total():
    g = TimeGrid(1.0, 10)
    v = np.vstack([np.ones(11), g.nodes])
    cum = cumulative_clock_integral(v, g)
    assert np.allclose(cum[:, -1], clock_integral(v, g))
    assert np.all(cum[:, 0] == 0.0)


def test_stream_rejects_negative():
    with pytest.raises(ParameterError):
        ConsumptionStream(-np.ones((1, 3)))


def test_stream_terminal_rate():
    s = ConsumptionStream(np.array([[1.0, 2.0, 5.0]]), terminal_rate=3.0)
    assert s.lump.tolist() == [5.0]
    assert s.rates().tolist() == [[1.0, 2.0, 3.0]]
    assert s.scaled(2.0).rates().tolist() == [[2.0, 4.0, 6.0]]
