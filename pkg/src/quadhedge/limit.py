"""The continuous-time control problem that discrete prices converge to.

The value is

    sup_nu  E[ H(S^nu) - N/(4 Lambda) |S^nu_1 - s|^2 - 1/(16 Lambda) int_0^1 G(nu_t^2) dt ],
    dS^nu = nu dW,

where ``G`` penalises variance outside ``[sigma_lo^2, sigma_hi^2]``.  For payoffs of
the terminal price the value solves ``v_t + Ham(v_xx) = 0`` with the
closed-form Hamiltonian below.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from . import kernels
from .controls import ControlFamily, VolControl
from .errors import BudgetExhausted, CflViolation, InvalidParams, NegativeInput, UnstableDetected, ValidationError
from .market import Payoff


def g_penalty(z, sigma_lo: float, sigma_hi: float):
    """Distance-like penalty of a variance ``z`` from the band ``[sigma_lo^2, sigma_hi^2]``."""
    za = np.asarray(z, dtype=float)
    if np.any(za < 0) or np.any(np.isnan(za)):
        raise NegativeInput("variance must be nonnegative")
    lo2, hi2 = sigma_lo**2, sigma_hi**2
    out = np.where(za < lo2, (sigma_lo - za / sigma_lo) ** 2,
                   np.where(za > hi2, (za / sigma_hi - sigma_hi) ** 2, 0.0))
    return float(out) if np.ndim(z) == 0 else out


def hamiltonian(q: float, sigma_lo: float, sigma_hi: float, lambda_cost: float) -> tuple[float, float]:
    """``sup_{z >= 0} q z / 2 - G(z) / (16 Lambda)`` and its maximiser."""
    lam = lambda_cost
    if q >= 0:
        return 0.5 * sigma_hi**2 * q + lam * sigma_hi**2 * q * q, sigma_hi**2 * (1 + 4 * lam * q)
    if q >= -1 / (4 * lam):
        return 0.5 * sigma_lo**2 * q + lam * sigma_lo**2 * q * q, sigma_lo**2 * (1 + 4 * lam * q)
    return -sigma_lo**2 / (16 * lam), 0.0


def bachelier_call(s: float, strike: float, sigma: float, T: float = 1.0) -> float:
    """``E (s + sigma W_T - K)^+``."""
    sd = sigma * math.sqrt(T)
    d = (s - strike) / sd
    return (s - strike) * norm.cdf(d) + sd * norm.pdf(d)


@dataclass(frozen=True)
class LimitObjective:
    payoff: Payoff
    lookahead: int = 0
    lambda_cost: float = 0.5
    sigma_lo: float = 1.0
    sigma_hi: float = 1.0
    s: float = 0.0

    def __post_init__(self):
        if not 0 < self.sigma_lo <= self.sigma_hi:
            raise InvalidParams("need 0 < sigma_lo <= sigma_hi")
        if not self.lambda_cost > 0:
            raise InvalidParams("lambda_cost must be positive")
        if int(self.lookahead) != self.lookahead or self.lookahead < 0:
            raise InvalidParams("lookahead must be a nonnegative integer")

    def terminal(self, lookahead: Optional[int] = None) -> Callable:
        N = self.lookahead if lookahead is None else lookahead
        h = self.payoff.terminal_function(self.s)
        c = N / (4 * self.lambda_cost)
        return lambda x: h(x) - c * (np.asarray(x) - self.s) ** 2


# ---------------------------------------------------------------------------
# finite differences


@dataclass(frozen=True)
class HjbGrid:
    x_lo: float
    x_hi: float
    nx: int = 201
    nt: Optional[int] = None
    q_cap: float = 50.0
    cfl: float = 0.9

    def __post_init__(self):
        if not self.x_lo < self.x_hi or self.nx < 3 or self.q_cap <= 0 or not 0 < self.cfl <= 1:
            raise InvalidParams("need x_lo < x_hi, nx >= 3, q_cap > 0, 0 < cfl <= 1")

    @classmethod
    def around(cls, s: float, sigma_hi: float, nx: int = 201, width: float = 8.0, **kw) -> "HjbGrid":
        return cls(s - width * sigma_hi, s + width * sigma_hi, nx=nx, **kw)

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.nx - 1)

    def z_cap(self, sigma_hi: float, lambda_cost: float) -> float:
        return sigma_hi**2 * (1 + 4 * lambda_cost * self.q_cap)

    def steps(self, sigma_hi: float, lambda_cost: float) -> int:
        limit = self.dx**2 / self.z_cap(sigma_hi, lambda_cost)
        if self.nt is None:
            return int(math.ceil(1.0 / (self.cfl * limit)))
        if 1.0 / self.nt > limit * (1 + 1e-12):
            raise CflViolation(f"dt = {1 / self.nt:.3e} exceeds dx^2/z_cap = {limit:.3e}")
        return self.nt

    def points(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.nx)


@dataclass(frozen=True, eq=False)
class HjbResult:
    value: float
    x: np.ndarray
    v: np.ndarray
    nt: int


def hjb_solve(objective: LimitObjective, grid: Optional[HjbGrid] = None,
              terminal: Optional[Callable] = None) -> HjbResult:
    """Explicit monotone scheme ``v <- v + dt * Ham_cap(D2 v)`` from ``t = 1`` back to 0."""
    if not objective.payoff.markovian and terminal is None:
        raise ValidationError("the grid solver needs a payoff of the terminal price")
    grid = grid or HjbGrid.around(objective.s, objective.sigma_hi)
    if not grid.x_lo < objective.s < grid.x_hi:
        raise InvalidParams("the grid must contain s in its interior")
    lam = objective.lambda_cost
    nt = grid.steps(objective.sigma_hi, lam)
    x = grid.points()
    term = terminal if terminal is not None else objective.terminal()
    v = np.ascontiguousarray(np.asarray(term(x), dtype=float))
    if not np.all(np.isfinite(v)):
        raise ValidationError("terminal function must be finite on the grid")
    guard = 1e6 * (1.0 + float(np.max(np.abs(v))))
    ok = kernels.hjb_sweep(v, nt, 1.0 / nt, grid.dx, objective.sigma_lo**2, objective.sigma_hi**2,
                           lam, grid.z_cap(objective.sigma_hi, lam), guard)
    if not ok:
        raise UnstableDetected("value grid blew up during time stepping")
    return HjbResult(float(np.interp(objective.s, x, v)), x, v, nt)


def hjb_value(objective: LimitObjective, grid: Optional[HjbGrid] = None) -> float:
    return hjb_solve(objective, grid).value


@dataclass(frozen=True)
class InsiderValue:
    v_N: float
    v_0_adjusted: float
    difference: float


def insider_value(objective: LimitObjective, grid: Optional[HjbGrid] = None) -> InsiderValue:
    """Value with lookahead N next to the N = 0 problem with the adjusted terminal payoff."""
    v_n = hjb_solve(objective, grid).value
    base = LimitObjective(objective.payoff, 0, objective.lambda_cost, objective.sigma_lo,
                          objective.sigma_hi, objective.s)
    v_0 = hjb_solve(base, grid, terminal=objective.terminal()).value
    return InsiderValue(v_n, v_0, v_n - v_0)


def large_n_asymptote(h: Union[Payoff, Callable], s: float, sigma_lo: float, lambda_cost: float) -> float:
    """Limit of the value as the lookahead grows: ``h(s) - sigma_lo^2 / (16 Lambda)``."""
    hs = h.terminal_function(s)(np.array(s)) if isinstance(h, Payoff) else h(s)
    return float(hs) - sigma_lo**2 / (16 * lambda_cost)


# ---------------------------------------------------------------------------
# Monte Carlo lower bounds


@dataclass(frozen=True)
class McOptions:
    n_paths: int = 20_000
    n_steps: int = 512
    seed: int = 0
    threads: int = 1
    chunk: int = 4096


@dataclass(frozen=True)
class McEstimate:
    estimate: float
    stderr: float
    n_paths: int


def _mc_chunk(objective: LimitObjective, control: VolControl, opts: McOptions, c: int, size: int):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(opts.seed), c])))
    M = opts.n_steps
    dt = 1.0 / M
    dW = rng.standard_normal((size, M)) * math.sqrt(dt)
    W = np.zeros((size, M + 1))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    S = np.empty((size, M + 1))
    S[:, 0] = objective.s
    pen = np.zeros(size)
    for j in range(M):
        nu = control(j * dt, W[:, : j + 1], dt)
        S[:, j + 1] = S[:, j] + nu * dW[:, j]
        pen += g_penalty(nu * nu, objective.sigma_lo, objective.sigma_hi) * dt
    N, lam = objective.lookahead, objective.lambda_cost
    return objective.payoff.evaluate(S) - N / (4 * lam) * (S[:, -1] - objective.s) ** 2 - pen / (16 * lam)


def mc_samples(objective: LimitObjective, control: VolControl, opts: Optional[McOptions] = None) -> np.ndarray:
    """Per-path objective values; chunk ``c`` always uses the stream keyed by ``(seed, c)``."""
    opts = opts or McOptions()
    sizes = [min(opts.chunk, opts.n_paths - c * opts.chunk) for c in range(-(-opts.n_paths // opts.chunk))]
    job = lambda c: _mc_chunk(objective, control, opts, c, sizes[c])
    if opts.threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(opts.threads) as ex:
            parts = list(ex.map(job, range(len(sizes))))
    else:
        parts = [job(c) for c in range(len(sizes))]
    return np.concatenate(parts)


def mc_lower_bound(objective: LimitObjective, control: VolControl, opts: Optional[McOptions] = None) -> McEstimate:
    vals = mc_samples(objective, control, opts)
    return McEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals))), len(vals))


@dataclass(frozen=True)
class OptimizerOptions:
    maxfev: int = 120
    mc: McOptions = McOptions(n_paths=8192, n_steps=128)
    validation_seed: Optional[int] = None
    xatol: float = 1e-3
    fatol: float = 1e-5
    strict: bool = False


@dataclass(frozen=True, eq=False)
class OptimizeResult:
    control: VolControl
    value: float
    stderr: float
    in_sample: float
    theta: np.ndarray
    nfev: int
    converged: bool


def optimize_control(objective: LimitObjective, family: ControlFamily,
                     opts: Optional[OptimizerOptions] = None) -> OptimizeResult:
    """Nelder-Mead search over the family with one fixed set of random numbers.

    The returned ``value`` is re-estimated on an independent sample so it is
    not biased upwards by the search.
    """
    opts = opts or OptimizerOptions()
    k = family.n_params
    if k > 32:
        raise ValidationError("families are limited to 32 parameters")
    x0 = np.asarray(family.x0, dtype=float)
    simplex = np.vstack([x0] + [x0 + np.eye(k)[i] * family.scale[i] for i in range(k)])
    cache: dict = {}

    def neg(theta):
        key = tuple(np.round(theta, 12))
        if key not in cache:
            try:
                ctl = family.build(theta)
            except InvalidParams:
                cache[key] = math.inf
            else:
                cache[key] = -mc_lower_bound(objective, ctl, opts.mc).estimate
        return cache[key]

    res = minimize(neg, x0, method="Nelder-Mead",
                   options=dict(maxfev=opts.maxfev, initial_simplex=simplex, xatol=opts.xatol, fatol=opts.fatol))
    converged = bool(res.success)
    if opts.strict and not converged:
        raise BudgetExhausted(f"no convergence within {opts.maxfev} evaluations")
    best = family.build(res.x)
    seed = opts.validation_seed if opts.validation_seed is not None else opts.mc.seed + 1
    val = mc_lower_bound(objective, best, McOptions(opts.mc.n_paths, opts.mc.n_steps, seed, opts.mc.threads))
    return OptimizeResult(best, val.estimate, val.stderr, float(-res.fun), np.asarray(res.x), int(res.nfev), converged)
