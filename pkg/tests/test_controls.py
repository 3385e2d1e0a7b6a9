import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadhedge import InvalidParams, VolControl
from quadhedge.controls import constant_family, feature_family, random_control, with_params


def test_constant():
    c = VolControl.constant(1.3, sigma_hi=2.0)
    np.testing.assert_array_equal(c(0.99, np.zeros((4, 3)), 0.01), 1.3)
    assert not c.has_terminal_window


def test_terminal_window_returns_sigma_hi():
    c = VolControl(base=1.0, coef=(0.5, 0.5, 0.1), clamp_lo=0.5, clamp_hi=2.0, sigma_hi=1.5, delta=0.1, ramp=0.05)
    h = np.random.default_rng(0).normal(size=(6, 50))
    np.testing.assert_array_equal(c(0.9, h, 0.02), 1.5)
    np.testing.assert_array_equal(c(0.97, h, 0.02), 1.5)
    assert c.weight(0.8) == 1.0 and c.weight(0.875) == pytest.approx(0.5)


def test_validation():
    with pytest.raises(InvalidParams):
        VolControl(base=1.0, clamp_lo=0.0, clamp_hi=1.0)
    with pytest.raises(InvalidParams):
        VolControl(base=1.0, coef=(1.0, 2.0), clamp_lo=0.5, clamp_hi=1.0)
    with pytest.raises(InvalidParams):
        VolControl(base=1.0, clamp_lo=0.5, clamp_hi=1.0, sigma_hi=2.0, delta=0.1)


def test_lag_uses_window():
    c = VolControl(base=0.0, coef=(0.0, 1.0, 0.0), clamp_lo=0.01, clamp_hi=10.0, sigma_hi=1.0, delta=0.0,
                   ramp=0.0, window=0.1)
    h = np.arange(11.0)[None, :] * 0.01  # B sampled every 0.01
    # lag 0.1 = 10 steps back: B_t - B_{t-h} = 0.1
    assert c.raw(0.1, h, 0.01)[0] == pytest.approx(max(np.tanh(0.1), 0.01))


@given(seed=st.integers(0, 2**32), t=st.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_random_control_stays_in_clamps(seed, t):
    rng = np.random.default_rng(seed)
    c = random_control(rng, 1.0, 1.5)
    v = c(t, rng.normal(size=(8, 20)), 0.01)
    assert np.all(v >= c.clamp_lo - 1e-12) and np.all(v <= c.clamp_hi + 1e-12)
    assert c.lipschitz_budget >= 0


@given(seed=st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_lipschitz_in_path(seed):
    rng = np.random.default_rng(seed)
    c = random_control(rng, 1.0, 1.5)
    h = rng.normal(size=(1, 30))
    bump = rng.uniform(-0.1, 0.1, size=(1, 30))
    a, b = c(0.5, h, 0.02)[0], c(0.5, h + bump, 0.02)[0]
    assert abs(a - b) <= c.lipschitz_budget * np.max(np.abs(bump)) + 1e-12


def test_families():
    fam = constant_family(0.5, 1.5)
    assert fam.build(np.array([3.0])).base == 1.5 and fam.build(np.array([0.0])).base == 0.5
    feat = feature_family(1.0, 1.5, 0.5, 2.0)
    assert feat.n_params == 4
    ctl = feat.build(np.array(feat.x0))
    assert ctl.base == 1.5 and ctl.sigma_hi == 1.5
    assert with_params(ctl, base=1.2).base == 1.2
