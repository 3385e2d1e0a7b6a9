import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadhedge import (
    BlockTooShort,
    DiscretizationParams,
    InfoIndex,
    ModelParams,
    Strategy,
    ValidationError,
    build_tree,
    insider_block_strategy,
    lemma43_rhs,
    wealth,
)
from quadhedge.hedging import (
    block_boundaries,
    block_shortfall,
    icbrt,
    leaf_terminal_wealth,
    wealth_from_positions,
)

DISC = DiscretizationParams(eps=0.5, lam=0.5, c_lambda=3.0)


def loop_wealth(gamma, x, lam):
    # direct transcription of the recursion with gamma_{-1} = 0
    n = len(x)
    y, prev = 0.0, 0.0
    for i in range(n):
        y += gamma[i] * x[i] / math.sqrt(n) - lam * (gamma[i] - prev) ** 2
        prev = gamma[i]
    return y


class TestWealth:
    def test_single_step(self):
        assert wealth(ModelParams(1), [1.0], [1.0]).terminal == pytest.approx(0.5)

    def test_zero_strategy(self):
        led = wealth(ModelParams(3, sigma_lo=1, sigma_hi=2), [0, 0, 0], [2, -1, 1.5])
        assert led.terminal == 0 and led.total_cost == 0

    def test_two_steps(self):
        led = wealth(ModelParams(2, lambda_cost=1.0), [1.0, 0.0], [1, 1])
        assert led.terminal == pytest.approx(1 / math.sqrt(2) - 2)
        np.testing.assert_allclose(led.costs, [1.0, 1.0])
        assert led.final_position == 0.0

    @given(n=st.integers(1, 40), lam=st.floats(0.05, 3), seed=st.integers(0, 2**32))
    @settings(max_examples=100, deadline=None)
    def test_summation_by_parts(self, n, lam, seed):
        rng = np.random.default_rng(seed)
        x = rng.choice([-1, 1], n) * rng.uniform(0.5, 1.5, n)
        g = rng.normal(size=n) * 3
        p = ModelParams(n, sigma_lo=0.5, sigma_hi=1.5, lambda_cost=lam)
        Y = wealth(p, g, x).terminal
        S = np.concatenate([[0.0], np.cumsum(x) / math.sqrt(n)])
        d = np.diff(g, prepend=0.0)
        by_parts = float(np.sum(d * (S[-1] - S[:-1])) - lam * np.sum(d * d))
        assert abs(Y - by_parts) <= 1e-12 * max(1.0, abs(Y))
        assert Y == pytest.approx(loop_wealth(g, x, lam), abs=1e-12)

    def test_shape_checked(self):
        with pytest.raises(ValidationError):
            wealth(ModelParams(3), [1.0, 2.0], [1, 1, 1])


class TestTreeStrategy:
    @pytest.mark.parametrize("N", [0, 1, 2, 3])
    def test_slot_count(self, N):
        p = ModelParams(3, sigma_lo=1, sigma_hi=2, lookahead=N)
        idx = InfoIndex(build_tree(p), N)
        assert idx.n_slots == sum(4 ** min(i + N, 3) for i in range(3))

    @given(N=st.integers(0, 3), seed=st.integers(0, 2**32))
    @settings(max_examples=30, deadline=None)
    def test_measurability(self, N, seed):
        p = ModelParams(3, sigma_lo=1, sigma_hi=2, lookahead=N)
        tree = build_tree(p)
        rng = np.random.default_rng(seed)
        strat = Strategy(InfoIndex(tree, N), rng.normal(size=InfoIndex(tree, N).n_slots))
        G = strat.leaf_positions()
        R = tree.leaf_returns
        for _ in range(40):
            a, b = rng.integers(tree.n_leaves, size=2)
            for i in range(3):
                d = min(i + N, 3)
                if np.array_equal(R[a, :d], R[b, :d]):
                    assert G[a, i] == G[b, i]

    def test_leaf_wealth_matches_path_wealth(self):
        p = ModelParams(3, sigma_lo=1, sigma_hi=2, lookahead=1, lambda_cost=0.7)
        tree = build_tree(p)
        idx = InfoIndex(tree, 1)
        strat = Strategy(idx, np.random.default_rng(3).normal(size=idx.n_slots))
        Y = leaf_terminal_wealth(p, strat)
        for leaf in (0, 5, 33, 63):
            x = tree.leaf_returns[leaf]
            assert Y[leaf] == pytest.approx(wealth(p, strat, x).terminal, abs=1e-12)
            np.testing.assert_array_equal(strat.along(x), strat.leaf_positions()[leaf])


def zigzag(n):
    return np.array([1.0, -1.0] * (n // 2))


class TestBlockStrategy:
    def test_icbrt(self):
        assert [icbrt(n) for n in (1, 7, 8, 26, 27, 64, 1000, 1001)] == [1, 1, 2, 2, 3, 4, 10, 10]

    @given(st.integers(1, 10**9))
    @settings(max_examples=200)
    def test_icbrt_bracket(self, n):
        r = icbrt(n)
        assert r**3 <= n < (r + 1) ** 3

    def test_blocks_from_time_trigger(self):
        np.testing.assert_array_equal(block_boundaries(ModelParams(64), DISC, zigzag(64)), [0, 16, 32, 48, 64])

    @pytest.mark.parametrize("schedule", ["anticipative", "adapted"])
    def test_zero_inputs_give_zero(self, schedule):
        s = insider_block_strategy(ModelParams(64), DISC, np.zeros(10), np.zeros(10), zigzag(64), schedule)
        assert np.all(s.positions == 0)

    def test_ramp(self):
        s = insider_block_strategy(ModelParams(64), DISC, [2.0, 0, 0, 0], [0, 0, 0, 0], zigzag(64))
        np.testing.assert_allclose(s.positions[:4], [0.5, 1.0, 1.5, 2.0])

    def test_insider_step(self):
        p = ModelParams(64, lookahead=1, lambda_cost=0.5)
        x = zigzag(64)
        s = insider_block_strategy(p, DISC, np.zeros(4), np.zeros(4), x)
        # middle of block 0 is [4, 12)
        dg = np.diff(s.positions)[4:11]
        np.testing.assert_allclose(dg, x[5:12] / 8.0)
        assert s.positions[4] == pytest.approx(x[4] / 8.0)

    def test_unwind_and_inactive_tail(self):
        p = ModelParams(64, lookahead=1)
        s = insider_block_strategy(p, DISC, [1.0] * 4, [0.5] * 4, zigzag(64))
        for end in (16, 32, 48, 64):
            assert s.positions[end - 1] == 0.0
        blocks = len(s.blocks) - 1
        assert blocks == 4

    def test_inactive_blocks_do_not_trade(self):
        # n = 64: blocks that start after 64 - 2*4 = 56 stay flat
        p = ModelParams(64)
        x = np.array([1.0, -1.0] * 28 + [1.0] * 8)
        a = block_boundaries(p, DISC, x)
        s = insider_block_strategy(p, DISC, [1.0] * 10, [0.0] * 10, x)
        late = np.flatnonzero(a[:-1] > 64 - 2 * 4)
        assert late.size
        assert np.all(s.positions[a[late[0]]:] == 0)

    def test_block_too_short(self):
        with pytest.raises(BlockTooShort):
            insider_block_strategy(ModelParams(64), DiscretizationParams(0.2, 0.5, 3.0), [0] * 80, [0] * 80,
                                   zigzag(64))

    def test_rejects_large_phi(self):
        with pytest.raises(ValidationError):
            insider_block_strategy(ModelParams(64), DISC, [5.0] * 4, [0] * 4, zigzag(64))

    def test_rejects_unknown_schedule(self):
        with pytest.raises(ValidationError):
            insider_block_strategy(ModelParams(64), DISC, [0] * 4, [0] * 4, zigzag(64), schedule="late")

    @given(N=st.integers(0, 3), seed=st.integers(0, 2**32))
    @settings(max_examples=40, deadline=None)
    def test_adapted_schedule_is_measurable(self, N, seed):
        n = 216
        rng = np.random.default_rng(seed)
        p = ModelParams(n, lookahead=N)
        disc = DiscretizationParams(0.6, 0.5, 3.0)
        phi, psi = rng.uniform(-2, 2, 40), rng.uniform(-2, 2, 40)
        x = rng.choice([-1.0, 1.0], n)
        i = int(rng.integers(0, n - N))
        y = x.copy()
        y[i + N:] = rng.choice([-1.0, 1.0], n - i - N)
        try:
            gx = insider_block_strategy(p, disc, phi, psi, x, "adapted").positions
            gy = insider_block_strategy(p, disc, phi, psi, y, "adapted").positions
        except BlockTooShort:
            return
        np.testing.assert_array_equal(gx[: i + 1], gy[: i + 1])

    def test_anticipative_schedule_looks_ahead(self):
        # the unwind starts r steps before the next stopping time, so two paths that
        # agree up to time i can hold different positions at i
        p = ModelParams(64)
        x = zigzag(64)
        y = x.copy()
        y[10:14] = 1.0  # price reaches 0.5 at step 14 instead of the time trigger at 16
        gx = insider_block_strategy(p, DISC, [2.0] * 30, [0.0] * 30, x, "anticipative").positions
        gy = insider_block_strategy(p, DISC, [2.0] * 30, [0.0] * 30, y, "anticipative").positions
        assert gx[10] != gy[10]
        ax = insider_block_strategy(p, DISC, [2.0] * 30, [0.0] * 30, x, "adapted").positions
        ay = insider_block_strategy(p, DISC, [2.0] * 30, [0.0] * 30, y, "adapted").positions
        np.testing.assert_array_equal(ax[:11], ay[:11])


class TestBlockRhs:
    def test_zero(self):
        assert lemma43_rhs(ModelParams(64), DISC, np.zeros(4), np.zeros(4), zigzag(64)) == 0.0

    def test_lookahead_bonus(self):
        # one block (eps close to 1) with a net move of 0.5
        x = np.array([1.0, -1.0] * 7 + [1.0, 1.0])
        p = ModelParams(16, lookahead=1, lambda_cost=0.5)
        disc = DiscretizationParams(0.99, 0.5, 3.0)
        assert len(block_boundaries(p, disc, x)) == 2
        assert lemma43_rhs(p, disc, [0.0], [0.0], x) == pytest.approx(0.125)

    def test_variance_term(self):
        # first block covers two steps of n = 10: quadratic variation 0.2, no net move
        x = np.array([1.0, -1.0] * 5)
        p = ModelParams(10, lambda_cost=1.0)
        disc = DiscretizationParams(0.4, 0.5, 3.0)
        assert block_boundaries(p, disc, x)[1] == 2
        psi = np.zeros(10)
        psi[0] = 1.0
        assert lemma43_rhs(p, disc, np.zeros(10), psi, x) == pytest.approx(-0.3)

    @pytest.mark.parametrize("schedule", ["anticipative", "adapted"])
    def test_shortfall_small_relative_to_rhs_scale(self, schedule):
        rng = np.random.default_rng(11)
        n = 4096
        p = ModelParams(n, lookahead=1)
        disc = DiscretizationParams(0.5, 0.5, 3.0)
        worst = 0.0
        for _ in range(20):
            x = rng.choice([-1.0, 1.0], n)
            phi, psi = rng.uniform(-2, 2, 60), rng.uniform(-2, 2, 60)
            worst = max(worst, block_shortfall(p, disc, phi, psi, x, schedule))
        assert worst <= math.log(n) ** 2 * n ** (-1 / 6)


def test_wealth_from_positions_ledger():
    led = wealth_from_positions(np.array([1.0, 3.0]), np.array([0.5, -0.5]), 0.25)
    np.testing.assert_allclose(led.wealth, [0.0, 0.25, -2.25])
    assert led.total_cost == pytest.approx(1.25)
