import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadhedge import (
    CapExceeded,
    DiscretizationParams,
    InvalidParams,
    ModelParams,
    OutOfOmega,
    Payoff,
    build_tree,
    eval_payoff,
    stock_prices,
    stopping_times,
)
from quadhedge.market import check_in_omega, info_depth, stopping_time_indices

params_strategy = st.builds(
    lambda n, lo, width, k, N: ModelParams(n=n, sigma_lo=lo, sigma_hi=lo + width, grid_k=k, lookahead=min(N, n)),
    st.integers(1, 4),
    st.floats(0.2, 2.0),
    st.sampled_from([0.0, 0.5, 1.3]),
    st.integers(1, 2),
    st.integers(0, 3),
)


class TestTree:
    def test_two_magnitudes(self):
        t = build_tree(ModelParams(1, sigma_lo=1, sigma_hi=2, grid_k=1))
        assert ModelParams(1, sigma_lo=1, sigma_hi=2).branching == 4
        assert sorted(t.leaf_returns[:, 0]) == [-2, -1, 1, 2]

    def test_degenerate_band_collapses(self):
        p = ModelParams(1, sigma_lo=1, sigma_hi=1, grid_k=3)
        assert p.branching == 2
        assert sorted(build_tree(p).leaf_returns[:, 0]) == [-1, 1]

    def test_three_magnitudes(self):
        p = ModelParams(2, sigma_lo=1, sigma_hi=2, grid_k=2)
        assert p.magnitudes == (2.0, 1.5, 1.0)
        assert p.branching == 6
        assert build_tree(p).n_leaves == 36

    def test_child_order(self):
        t = build_tree(ModelParams(1, sigma_lo=1, sigma_hi=2))
        assert list(t.returns[1]) == [2.0, -2.0, 1.0, -1.0]

    def test_cap(self):
        with pytest.raises(CapExceeded):
            build_tree(ModelParams(10, sigma_lo=1, sigma_hi=2, grid_k=3), cap=10_000)

    def test_locate_roundtrip(self):
        t = build_tree(ModelParams(3, sigma_lo=1, sigma_hi=2))
        for leaf in (0, 17, 63):
            nodes = t.locate(t.leaf_returns[leaf])
            assert nodes[-1] == leaf and t.node_id(t.depth, nodes[-1]) == t.offsets[-1] + leaf

    @given(params_strategy)
    @settings(max_examples=40, deadline=None)
    def test_leaves_in_omega_and_counted(self, p):
        t = build_tree(p)
        assert t.n_leaves == p.branching**p.n
        a = np.abs(t.leaf_returns)
        assert np.all(a >= p.sigma_lo - 1e-12) and np.all(a <= p.sigma_hi + 1e-12)
        assert len({tuple(r) for r in t.leaf_returns}) == t.n_leaves

    def test_info_depth(self):
        assert [info_depth(i, 2, 5) for i in range(5)] == [2, 3, 4, 5, 5]


class TestPaths:
    def test_prices_formula(self):
        np.testing.assert_allclose(stock_prices(ModelParams(4), [1, -1, 1, 1]).prices, [0, 0.5, 0, 0.5, 1.0])
        np.testing.assert_allclose(stock_prices(ModelParams(1, s=5, sigma_lo=1, sigma_hi=2), [-2]).prices, [5, 3])
        assert stock_prices(ModelParams(4), [1, 1, 1, 1]).prices[-1] == pytest.approx(2.0)

    def test_rejects_outside_band(self):
        with pytest.raises(OutOfOmega):
            check_in_omega(ModelParams(2, sigma_lo=1, sigma_hi=2), [1.0, 2.5])
        with pytest.raises(OutOfOmega):
            check_in_omega(ModelParams(2, sigma_lo=1, sigma_hi=2), [0.5, 1.0])

    def test_rejects_bad_params(self):
        for kw in ({"n": 0}, {"n": 2, "sigma_lo": 2, "sigma_hi": 1}, {"n": 2, "lambda_cost": 0},
                   {"n": 2, "lookahead": -1}, {"n": 2, "grid_k": 0}):
            with pytest.raises(InvalidParams):
                ModelParams(**kw)


class TestPayoffs:
    def test_examples(self):
        up = stock_prices(ModelParams(4), [1, 1, 1, 1])
        zig = stock_prices(ModelParams(4), [1, -1, 1, 1])
        assert eval_payoff(Payoff.call(0), up) == pytest.approx(2.0)
        assert eval_payoff(Payoff.lookback_max(), zig) == pytest.approx(1.0)
        assert eval_payoff(Payoff.constant(7), zig) == 7

    def test_shift_and_combination(self):
        path = stock_prices(ModelParams(4), [1, -1, 1, 1])
        c = Payoff.call(0.2)
        assert eval_payoff(c.shift(3), path) == pytest.approx(eval_payoff(c, path) + 3)
        mix = Payoff.combination([(0.25, c), (0.75, Payoff.lookback_max())])
        assert eval_payoff(mix, path) == pytest.approx(0.25 * 0.8 + 0.75 * 1.0)

    @pytest.mark.parametrize("payoff", [Payoff.call(0.1), Payoff.lookback_max()])
    @given(base=st.lists(st.floats(-3, 3), min_size=5, max_size=5),
           bump=st.lists(st.floats(-0.5, 0.5), min_size=5, max_size=5))
    @settings(max_examples=60, deadline=None)
    def test_one_lipschitz_in_sup_norm(self, payoff, base, bump):
        a = np.array(base)
        b = a + np.array(bump)
        diff = abs(float(payoff.evaluate(a)) - float(payoff.evaluate(b)))
        assert diff <= np.max(np.abs(a - b)) + 1e-12
        assert payoff.lipschitz == 1.0

    def test_terminal_function_rejects_path_dependent(self):
        with pytest.raises(Exception):
            Payoff.lookback_max().terminal_function(0.0)


class TestStoppingTimes:
    def test_space_trigger(self):
        path = stock_prices(ModelParams(16), [1] * 16)
        assert stopping_times(path, 0.5).taus[1] == pytest.approx(2 / 16)

    def test_capped_at_one(self):
        path = stock_prices(ModelParams(16), [1, -1] * 8)
        st_ = stopping_times(path, 1.0)
        assert st_.taus[1] == 1.0

    def test_space_trigger_before_time_trigger(self):
        # |S| reaches 0.9 after four steps of 1/4, well before the time bound 0.81
        path = stock_prices(ModelParams(16), [1] * 16)
        assert stopping_times(path, 0.9).taus[1] == pytest.approx(4 / 16)

    def test_time_trigger(self):
        # oscillating path never moves 0.9; the first grid time with t >= 0.81 is 13/16
        path = stock_prices(ModelParams(16), [1, -1] * 8)
        assert stopping_times(path, 0.9).taus[1] == pytest.approx(13 / 16)

    def test_sampled_step_path(self):
        path = stock_prices(ModelParams(16), [1] * 16)
        sp = stopping_times(path, 0.5)
        assert sp(0.0) == 0.0 and sp(2 / 16) == pytest.approx(0.5) and sp(1.0) == pytest.approx(4.0)

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(InvalidParams):
            stopping_times(stock_prices(ModelParams(2), [1, 1]), 0.0)

    @given(n=st.integers(2, 200), eps=st.floats(0.05, 0.99), lo=st.floats(0.3, 1.0), seed=st.integers(0, 2**32))
    @settings(max_examples=80, deadline=None)
    def test_increment_bounds(self, n, eps, lo, seed):
        hi = lo + 0.7
        rng = np.random.default_rng(seed)
        x = rng.choice([-1, 1], n) * rng.uniform(lo, hi, n)
        path = stock_prices(ModelParams(n, sigma_lo=lo, sigma_hi=hi), x)
        sp = stopping_times(path, eps)
        assert sp.indices[0] == 0 and sp.indices[-1] == n
        assert np.all(np.diff(sp.indices) >= 1)
        assert np.all(np.abs(np.diff(sp.values)) <= eps + hi / math.sqrt(n) + 1e-12)
        assert np.all(np.diff(sp.taus) <= eps * eps + 1 / n + 1e-12)

    def test_max_count(self):
        prices = stock_prices(ModelParams(64), [1] * 64).prices
        assert len(stopping_time_indices(prices, 0.3, max_count=3)) == 4


class TestDiscretization:
    def test_block_count(self):
        d = DiscretizationParams(eps=0.5, lam=0.5, c_lambda=3.0)
        assert d.K == math.floor(3.0 / 0.0625) + 1

    def test_growth_constant_from_payoff(self):
        d = DiscretizationParams.from_payoff(Payoff.call(0), 0.0, 0.5, 0.2)
        assert d.c_lambda == pytest.approx(1 / (4 * 0.04))
        assert DiscretizationParams.from_payoff(Payoff.call(0), 0.0, 0.5, 0.5).c_lambda > 2

    def test_rejects(self):
        with pytest.raises(InvalidParams):
            DiscretizationParams(eps=1.5, lam=0.5, c_lambda=3)
        with pytest.raises(InvalidParams):
            DiscretizationParams(eps=0.5, lam=0.5, c_lambda=1)
