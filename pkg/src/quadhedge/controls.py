"""Parametrised path-dependent volatility controls.

A control maps time and the path of a driving process observed so far to a
volatility.  Features only read the history up to the current time, so every
control is progressively measurable by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidParams


@dataclass(frozen=True)
class VolControl:
    """Clamped feature model blended into ``sigma_hi`` before the terminal window.

    ``g = clip(base + a*tanh(B_t) + b*tanh(B_t - B_{t-h}) + c*t, lo, hi)`` and
    the returned value is ``w(t)*g + (1 - w(t))*sigma_hi`` with
    ``w(t) = clip((1 - delta - t)/ramp, 0, 1)``, so it equals ``sigma_hi`` on
    ``[1 - delta, 1]`` and stays Lipschitz in time.
    """

    base: float
    coef: tuple = (0.0, 0.0, 0.0)
    clamp_lo: float = 1.0
    clamp_hi: float = 1.0
    sigma_hi: float = 1.0
    delta: float = 0.05
    ramp: float = 0.05
    window: float = 0.1

    def __post_init__(self):
        if len(self.coef) != 3:
            raise InvalidParams("coef holds (level, increment, time) weights")
        if not 0 < self.clamp_lo <= self.clamp_hi or not math.isfinite(self.clamp_hi):
            raise InvalidParams(f"need 0 < clamp_lo <= clamp_hi, got {self.clamp_lo}, {self.clamp_hi}")
        if not 0 <= self.delta < 1 or self.ramp < 0 or self.window <= 0:
            raise InvalidParams("need 0 <= delta < 1, ramp >= 0, window > 0")
        if self.delta > 0 and not self.clamp_lo <= self.sigma_hi <= self.clamp_hi:
            raise InvalidParams("the terminal value sigma_hi must lie inside the clamp bounds")

    @classmethod
    def constant(cls, c: float, sigma_hi: float = None) -> "VolControl":
        """``nu = c`` for all times; no terminal window."""
        c = float(c)
        return cls(base=c, clamp_lo=c, clamp_hi=c, sigma_hi=c if sigma_hi is None else sigma_hi,
                   delta=0.0, ramp=0.0)

    @property
    def has_terminal_window(self) -> bool:
        return self.delta > 0

    @property
    def lipschitz_budget(self) -> float:
        """Bound on the Lipschitz constant in (time, sup-norm of the path)."""
        a, b, c = (abs(v) for v in self.coef)
        blend = 0.0 if self.ramp == 0 else max(abs(self.clamp_hi - self.sigma_hi),
                                                abs(self.clamp_lo - self.sigma_hi)) / self.ramp
        return a + 2 * b + c + blend

    def weight(self, t: float) -> float:
        if self.delta == 0 and self.ramp == 0:
            return 1.0
        if self.ramp == 0:
            return 1.0 if t < 1 - self.delta else 0.0
        return min(max((1 - self.delta - t) / self.ramp, 0.0), 1.0)

    def raw(self, t: float, history: np.ndarray, dt: float) -> np.ndarray:
        h = np.atleast_2d(np.asarray(history, dtype=float))
        a, b, c = self.coef
        cur = h[:, -1]
        g = np.full(h.shape[0], self.base + c * t)
        if a:
            g = g + a * np.tanh(cur)
        if b:
            g = g + b * np.tanh(cur - _lagged(h, self.window / dt))
        return np.clip(g, self.clamp_lo, self.clamp_hi)

    def __call__(self, t: float, history: np.ndarray, dt: float) -> np.ndarray:
        """Values for each row of ``history`` (samples on the grid ``0, dt, .., t``)."""
        w = self.weight(t)
        if w == 0.0:
            return np.full(np.atleast_2d(history).shape[0], float(self.sigma_hi))
        g = self.raw(t, history, dt)
        return g if w == 1.0 else w * g + (1 - w) * self.sigma_hi


def _lagged(h: np.ndarray, lag_steps: float) -> np.ndarray:
    """Linear interpolation of each row at ``len - 1 - lag_steps`` (held at index 0)."""
    u = h.shape[1] - 1 - lag_steps
    if u <= 0:
        return h[:, 0]
    lo = int(math.floor(u))
    frac = u - lo
    if frac == 0.0:
        return h[:, lo]
    return (1 - frac) * h[:, lo] + frac * h[:, lo + 1]


@dataclass(frozen=True)
class ControlFamily:
    """A map from a parameter vector to a control, plus a starting point."""

    name: str
    build: Callable[[np.ndarray], VolControl]
    x0: tuple
    scale: tuple

    @property
    def n_params(self) -> int:
        return len(self.x0)


def constant_family(sigma_lo: float, sigma_hi: float) -> ControlFamily:
    """Constants in ``[sigma_lo, sigma_hi]`` (the parameter is clipped to the band)."""

    def build(theta):
        return VolControl.constant(float(np.clip(theta[0], sigma_lo, sigma_hi)), sigma_hi=sigma_hi)

    mid = 0.5 * (sigma_lo + sigma_hi)
    return ControlFamily("constant", build, (mid,), (max(0.25 * (sigma_hi - sigma_lo), 0.05 * sigma_hi),))


def feature_family(
    sigma_lo: float,
    sigma_hi: float,
    clamp_lo: float = None,
    clamp_hi: float = None,
    delta: float = 0.05,
    ramp: float = 0.05,
    window: float = 0.1,
) -> ControlFamily:
    """Four parameters ``(base, level, increment, time)`` of :class:`VolControl`."""
    lo = sigma_lo if clamp_lo is None else clamp_lo
    hi = sigma_hi if clamp_hi is None else clamp_hi

    def build(theta):
        base, a, b, c = (float(v) for v in theta)
        return VolControl(base=base, coef=(a, b, c), clamp_lo=lo, clamp_hi=hi, sigma_hi=sigma_hi,
                          delta=delta, ramp=ramp, window=window)

    return ControlFamily("feature", build, (sigma_hi, 0.0, 0.0, 0.0), (0.5 * sigma_hi, 0.5, 0.5, 0.5))


def random_control(rng: np.random.Generator, sigma_lo: float, sigma_hi: float, delta: float = 0.1,
                   strength: float = 0.5) -> VolControl:
    """A random control whose clamp range straddles the band."""
    lo = sigma_lo * rng.uniform(0.6, 1.0)
    hi = sigma_hi * rng.uniform(1.0, 1.5)
    base = rng.uniform(lo, hi)
    coef = tuple(float(v) for v in rng.uniform(-strength, strength, size=3))
    return VolControl(base=base, coef=coef, clamp_lo=lo, clamp_hi=hi, sigma_hi=sigma_hi,
                      delta=delta, ramp=0.1, window=float(rng.uniform(0.05, 0.3)))


def with_params(control: VolControl, **changes) -> VolControl:
    return replace(control, **changes)
