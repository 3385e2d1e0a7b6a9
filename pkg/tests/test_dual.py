import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from quadhedge import (
    InvalidMeasure,
    InvalidProbability,
    MeasuredTree,
    ModelParams,
    Payoff,
    ValidationError,
    VolControl,
    build_tree,
    dual_search,
    dual_value,
    qn_from_control,
    qn_sample,
    superrep_price,
)
from quadhedge.controls import random_control
from quadhedge.dual import qn_conditional_penalty, qn_node_moments


class TestDualValue:
    def test_centered_one_step(self):
        t = build_tree(ModelParams(1))
        assert dual_value(ModelParams(1), Payoff.constant(1), MeasuredTree.uniform(t)) == pytest.approx(1.0)

    def test_one_step_insider(self):
        p = ModelParams(1, lookahead=1)
        assert dual_value(p, Payoff.constant(1), MeasuredTree.uniform(build_tree(p))) == pytest.approx(0.5)

    def test_point_mass_drift(self):
        # all mass on x = (1, 1): drift-to-go sqrt2 at time 0 and 1/sqrt2 at time 1
        p = ModelParams(2)
        tree = build_tree(p)
        w = np.zeros(tree.n_leaves)
        w[0] = 1.0
        assert list(tree.leaf_returns[0]) == [1.0, 1.0]
        m = MeasuredTree.from_leaf_probabilities(tree, w)
        expected = math.sqrt(2) - (2.0 + 0.5) / (4 * 0.5)
        assert dual_value(p, Payoff.call(0), m) == pytest.approx(expected, abs=1e-12)

    @given(n=st.integers(1, 4), N=st.integers(0, 4), lam=st.floats(0.1, 2), seed=st.integers(0, 2**32),
           band=st.sampled_from([(1.0, 1.0), (1.0, 2.0)]))
    @settings(max_examples=40, deadline=None)
    def test_matches_grouping_oracle(self, n, N, lam, seed, band):
        N = min(N, n)
        p = ModelParams(n, sigma_lo=band[0], sigma_hi=band[1], lambda_cost=lam, lookahead=N, s=0.3)
        tree = build_tree(p)
        m = MeasuredTree.random(tree, np.random.default_rng(seed))
        payoff = Payoff.lookback_max()
        expected = oracles.dual_value_dict(tree.leaf_returns, m.leaf_probabilities, 0.3, lam, N,
                                           lambda S: float(np.max(S)))
        assert dual_value(p, payoff, m) == pytest.approx(expected, abs=1e-10)


class TestMeasuredTree:
    def test_probabilities_sum_to_one(self):
        m = MeasuredTree.random(build_tree(ModelParams(3, sigma_lo=1, sigma_hi=2)), np.random.default_rng(0))
        for level in m.node_probabilities:
            assert level.sum() == pytest.approx(1.0)

    def test_rejects_bad_conditionals(self):
        t = build_tree(ModelParams(1))
        with pytest.raises(InvalidMeasure):
            MeasuredTree(t, (np.ones(1), np.array([0.7, 0.7])))
        with pytest.raises(InvalidMeasure):
            MeasuredTree(t, (np.ones(1), np.array([1.2, -0.2])))

    def test_text_roundtrip(self):
        m = MeasuredTree.random(build_tree(ModelParams(2, sigma_lo=1, sigma_hi=2)), np.random.default_rng(5))
        text = m.to_text()
        back = MeasuredTree.from_text(text)
        np.testing.assert_array_equal(back.leaf_probabilities, m.leaf_probabilities)
        np.testing.assert_array_equal(back.tree.leaf_returns, m.tree.leaf_returns)
        assert back.to_text() == text

    def test_text_golden(self):
        text = MeasuredTree.uniform(build_tree(ModelParams(1))).to_text()
        assert text.splitlines() == ["0 -1 0.0 1.0", "1 0 1.0 0.5", "2 0 -1.0 0.5"]

    def test_from_text_rejects_garbage(self):
        with pytest.raises(ValidationError):
            MeasuredTree.from_text("0 -1 0.0\n")

    def test_leaf_roundtrip(self):
        tree = build_tree(ModelParams(3))
        w = np.random.default_rng(2).dirichlet(np.ones(8))
        np.testing.assert_allclose(MeasuredTree.from_leaf_probabilities(tree, w).leaf_probabilities, w)


class TestDualSearch:
    def test_measure_independent_case(self):
        p = ModelParams(1, lookahead=1)
        _, v = dual_search(p, Payoff.constant(1), MeasuredTree.uniform(build_tree(p)))
        assert v == pytest.approx(0.5)

    def test_no_insider_constant(self):
        p = ModelParams(1)
        m = MeasuredTree.random(build_tree(p), np.random.default_rng(1))
        _, v = dual_search(p, Payoff.constant(1), m)
        assert v == pytest.approx(1.0)

    def test_binomial_call_below_price(self):
        p = ModelParams(2)
        _, v = dual_search(p, Payoff.call(0), MeasuredTree.uniform(build_tree(p)))
        rep = superrep_price(p, Payoff.call(0))
        assert v <= rep.price + rep.certified_gap + 1e-8
        # the binomial tree has no slack: the uniform martingale measure is optimal
        assert v == pytest.approx(rep.price, abs=1e-6)

    def test_never_decreases(self):
        p = ModelParams(3, sigma_lo=1, sigma_hi=1.5, lookahead=1)
        m0 = MeasuredTree.random(build_tree(p), np.random.default_rng(4))
        _, v = dual_search(p, Payoff.call(0), m0)
        assert v >= dual_value(p, Payoff.call(0), m0) - 1e-12


class TestQn:
    def test_constant_control(self):
        p = ModelParams(6, sigma_lo=1, sigma_hi=2)
        m, rep = qn_from_control(p, VolControl.constant(1.4, sigma_hi=2))
        assert rep.valid
        for k in rep.kappa:
            assert np.all(k == 0)
        for pp in rep.prob_plus:
            np.testing.assert_allclose(pp, 0.5)
        for M, S in zip(rep.M, rep.S):
            np.testing.assert_allclose(M, S)
        np.testing.assert_allclose(np.abs(m.tree.leaf_returns), 1.4)

    def test_terminal_window(self):
        n = 10
        p = ModelParams(n, sigma_lo=1, sigma_hi=2)
        ctl = VolControl(base=1.5, coef=(0.4, 0.3, 0.0), clamp_lo=0.8, clamp_hi=2.5, sigma_hi=2.0, delta=0.3,
                         ramp=0.1)
        _, rep = qn_from_control(p, ctl)
        for k in range(1, n + 1):
            if (k - 1) / n >= 1 - 0.3:
                assert np.all(rep.kappa[k] == 0)
        np.testing.assert_allclose(rep.M[n], rep.S[n], atol=1e-15)

    @given(seed=st.integers(0, 2**32), n=st.integers(2, 9))
    @settings(max_examples=25, deadline=None)
    def test_martingale_increments(self, seed, n):
        p = ModelParams(n, sigma_lo=1, sigma_hi=1.5)
        ctl = random_control(np.random.default_rng(seed), 1.0, 1.5, strength=0.3)
        try:
            m, rep = qn_from_control(p, ctl)
        except InvalidProbability:
            return
        for k in range(1, n + 1):
            pp = rep.prob_plus[k - 1]
            for arr in (rep.B, rep.M):
                d = arr[k].reshape(-1, 2) - arr[k - 1][:, None]
                mean = pp * d[:, 0] + (1 - pp) * d[:, 1]
                assert np.max(np.abs(mean)) <= 1e-12

    def test_conditional_variance_order(self):
        ctl = VolControl(base=1.2, coef=(0.15, 0.1, 0.05), clamp_lo=1.05, clamp_hi=1.5, sigma_hi=1.5)
        scaled = []
        for n in (16, 64, 256, 1024):
            mom = qn_node_moments(ModelParams(n, sigma_lo=1, sigma_hi=1.5), ctl, 400, seed=n)
            np.testing.assert_allclose(mom.mean_dB, 0, atol=1e-12)
            np.testing.assert_allclose(mom.mean_dM, 0, atol=1e-12)
            scaled.append(np.max(np.abs(mom.second_dB - 1 / n)) * n**1.5)
        assert max(scaled) < 5.0

    def test_invalid_probability(self):
        # a control that jumps far outside the band forces p > 1
        ctl = VolControl(base=1.0, coef=(3.0, 3.0, 0.0), clamp_lo=0.2, clamp_hi=6.0, sigma_hi=1.0, delta=0.0)
        with pytest.raises(InvalidProbability):
            qn_from_control(ModelParams(8, sigma_lo=1, sigma_hi=1), ctl)
        m, rep = qn_from_control(ModelParams(8, sigma_lo=1, sigma_hi=1), ctl, strict=False)
        assert m is None and not rep.valid

    def test_weak_duality(self):
        p = ModelParams(5, sigma_lo=1, sigma_hi=1.5, lookahead=1)
        ctl = VolControl(base=1.3, coef=(0.1, 0.1, 0.0), clamp_lo=1.1, clamp_hi=1.6, sigma_hi=1.5)
        m, _ = qn_from_control(p, ctl)
        rep = superrep_price(p, Payoff.call(0), tree=None)
        assert dual_value(p, Payoff.call(0), m) <= rep.price + rep.certified_gap + 1e-8

    def test_sampling_matches_tree(self):
        p = ModelParams(6, sigma_lo=1, sigma_hi=1.5)
        ctl = VolControl(base=1.25, coef=(0.1, 0.05, 0.0), clamp_lo=1.1, clamp_hi=1.6, sigma_hi=1.5)
        m, rep = qn_from_control(p, ctl)
        paths = qn_sample(p, ctl, 20000, seed=3)
        exact = float(m.leaf_probabilities @ m.tree.leaf_prices(0.0)[:, -1] ** 2)
        mc = paths.S[:, -1] ** 2
        assert abs(mc.mean() - exact) <= 4 * mc.std() / math.sqrt(len(mc))

    def test_sampling_schedule_independent(self):
        p = ModelParams(64, sigma_lo=1, sigma_hi=1.5)
        ctl = VolControl(base=1.25, coef=(0.1, 0.05, 0.0), clamp_lo=1.1, clamp_hi=1.6, sigma_hi=1.5)
        a = qn_sample(p, ctl, 9000, seed=11, threads=1)
        b = qn_sample(p, ctl, 9000, seed=11, threads=3)
        np.testing.assert_array_equal(a.S, b.S)
        np.testing.assert_array_equal(a.B, b.B)

    @pytest.mark.parametrize("N,c", [(1, 1.2), (3, 1.0)])
    def test_penalty_decomposition(self, N, c):
        p = ModelParams(1024, sigma_lo=1, sigma_hi=1.5, lookahead=N)
        paths = qn_sample(p, VolControl.constant(c, sigma_hi=1.5), 4000, seed=N)
        pen = qn_conditional_penalty(p, paths)
        assert pen.mean() == pytest.approx(N * c * c, rel=0.05)
