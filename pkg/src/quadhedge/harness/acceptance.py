"""The acceptance criteria as named, runnable checks with a pass/fail verdict."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from ..controls import VolControl, constant_family, feature_family, random_control
from ..dual import MeasuredTree, dual_value, qn_from_control, qn_node_moments, qn_sample
from ..hedging import block_shortfall
from ..limit import (
    HjbGrid,
    LimitObjective,
    McOptions,
    OptimizerOptions,
    g_penalty,
    hamiltonian,
    hjb_value,
    large_n_asymptote,
    optimize_control,
)
from ..market import DiscretizationParams, ModelParams, Payoff, build_tree
from ..primal import superrep_bruteforce, superrep_price


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.metrics.items())
        return f"criterion {self.number:2d} [{'PASS' if self.passed else 'FAIL'}] {self.name}: {shown}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(tag)])))


def c01_one_step_insider(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    grid = np.round(np.arange(-2.0, 2.0 + 1e-9, 0.01), 10)
    m = {}
    ok = True
    for N, expected in ((0, 1.0), (1, 0.5)):
        p = ModelParams(n=1, lambda_cost=0.5, lookahead=N)
        price = superrep_price(p, Payoff.constant(1.0)).price
        brute = superrep_bruteforce(p, Payoff.constant(1.0), grid)
        m[f"pi_N{N}"] = price
        m[f"brute_N{N}"] = brute
        ok &= abs(price - expected) <= 1e-6 and abs(brute - expected) <= 1e-2
    sec = time.perf_counter() - t0
    m["seconds_lt_1"] = sec < 1.0
    return CriterionResult(1, "one-step insider closed form", bool(ok and sec < 1.0), m, sec)


def _random_instance(rng):
    n = int(rng.integers(1, 6))
    lo = float(rng.uniform(0.5, 1.0))
    hi = float(lo if rng.random() < 0.3 else rng.uniform(lo, 2.0))
    k = 1 if n >= 4 else int(rng.integers(1, 3))
    params = ModelParams(n=n, s=float(rng.uniform(-1, 1)), sigma_lo=lo, sigma_hi=hi,
                         lambda_cost=float(rng.uniform(0.25, 2.0)), lookahead=int(rng.integers(0, n + 1)), grid_k=k)
    choice = int(rng.integers(0, 4))
    if choice == 0:
        payoff = Payoff.call(float(rng.uniform(-1, 1)))
    elif choice == 1:
        payoff = Payoff.lookback_max()
    elif choice == 2:
        payoff = Payoff.constant(float(rng.uniform(-1, 1)))
    else:
        payoff = Payoff.terminal_quadratic(Payoff.call(float(rng.uniform(-1, 1))), float(rng.uniform(0, 1)))
    return params, payoff


def c02_weak_duality(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    rng = _rng(seed, 2)
    violations, checked, worst = 0, 0, -math.inf
    while checked < 100:
        params, payoff = _random_instance(rng)
        rep = superrep_price(params, payoff)
        tree = rep.strategy.index.tree
        for _ in range(5):
            mt = MeasuredTree.random(tree, rng, concentration=float(rng.uniform(0.2, 5.0)))
            d = dual_value(params, payoff, mt)
            excess = d - (rep.price + rep.certified_gap)
            worst = max(worst, excess)
            violations += excess > 1e-8
            checked += 1
    sec = time.perf_counter() - t0
    m = {"measures": checked, "violations": violations, "max_excess": worst, "seconds_lt_60": sec < 60}
    return CriterionResult(2, "weak duality on random measures", violations == 0 and sec < 60, m, sec)


def c03_qn_martingale(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    rng = _rng(seed, 3)
    lo, hi = 1.0, 1.5
    controls = [random_control(rng, lo, hi) for _ in range(5)]
    mean_b = mean_m = c_fit = 0.0
    for n in (16, 64, 256, 1024):
        p = ModelParams(n=n, sigma_lo=lo, sigma_hi=hi)
        for j, ctl in enumerate(controls):
            mo = qn_node_moments(p, ctl, 200, seed=seed * 1000 + j, min_depth=1)
            mean_b = max(mean_b, float(np.abs(mo.mean_dB).max()))
            mean_m = max(mean_m, float(np.abs(mo.mean_dM).max()))
            c_fit = max(c_fit, float((np.abs(mo.second_dB - 1.0 / n) * n**1.5).max()))
    budget = 100 * hi**3 / lo**2
    sec = time.perf_counter() - t0
    ok = mean_b <= 1e-12 and mean_m <= 1e-12 and c_fit <= budget and sec < 60
    m = {"max_mean_dB": mean_b, "max_mean_dM": mean_m, "fitted_C": c_fit, "C_budget": budget}
    return CriterionResult(3, "control-induced measures are martingales", ok, m, sec)


def c04_terminal_identity(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    rng = _rng(seed, 4)
    worst = 0.0
    for n in (16, 64, 256):
        p = ModelParams(n=n, sigma_lo=1.0, sigma_hi=1.5)
        for j in range(3):
            ctl = random_control(rng, 1.0, 1.5, delta=max(4.0 / n, float(rng.uniform(0.05, 0.2))))
            paths = qn_sample(p, ctl, 1000, seed=seed + j)
            worst = max(worst, float(np.abs(paths.M[:, -1] - paths.S[:, -1]).max()))
    _, rep = qn_from_control(ModelParams(n=10, sigma_lo=1.0, sigma_hi=1.5), random_control(rng, 1.0, 1.5, delta=0.4))
    worst = max(worst, float(np.abs(rep.M[-1] - rep.S[-1]).max()))
    sec = time.perf_counter() - t0
    return CriterionResult(4, "terminal window gives M_n = S_n", worst == 0.0, {"max_abs_diff": worst}, sec)


def c05_hamiltonian(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    rng = _rng(seed, 5)
    worst = cont = 0.0
    for _ in range(50):
        lo = float(rng.uniform(0.3, 1.5))
        hi = float(rng.uniform(lo, 2.0))
        lam = float(rng.uniform(0.1, 2.0))
        q = float(rng.uniform(-3.0, 12.0) / (4 * lam))
        z = np.arange(0.0, 50 * hi**2 + 5e-4, 1e-3)
        brute = float(np.max(0.5 * q * z - g_penalty(z, lo, hi) / (16 * lam)))
        worst = max(worst, abs(hamiltonian(q, lo, hi, lam)[0] - brute))
        qb = -1 / (4 * lam)
        left = 0.5 * lo**2 * qb + lam * lo**2 * qb * qb
        cont = max(cont, abs(hamiltonian(0.0, lo, hi, lam)[0] - 0.0), abs(left - (-lo**2 / (16 * lam))),
                   abs(hamiltonian(-1e-300, lo, hi, lam)[0] - hamiltonian(0.0, lo, hi, lam)[0]))
    sec = time.perf_counter() - t0
    ok = worst <= 1e-5 and cont <= 1e-12
    return CriterionResult(5, "closed-form Hamiltonian vs z-grid", ok, {"max_err": worst, "branch_jump": cont}, sec)


def c06_penalty(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    rng = _rng(seed, 6)
    min_err = lin_viol = band = 0.0
    for _ in range(5):
        lo = float(rng.uniform(0.3, 1.5))
        hi = float(rng.uniform(lo, 2.5))
        z = np.linspace(0.0, 4 * hi**2, 10_000)
        G = g_penalty(z, lo, hi)
        y = np.linspace(lo**2, hi**2, 2001)
        rep = ((z[:, None] - y[None, :]) ** 2 / y[None, :]).min(axis=1)
        ys = np.clip(z, lo**2, hi**2)
        rep = np.minimum(rep, (z - ys) ** 2 / ys)
        min_err = max(min_err, float(np.abs(G - rep).max()))
        lin_viol = max(lin_viol, float(np.max(lo**2 - 2 * hi * z / lo - G)))
        inside = np.linspace(lo**2, hi**2, 10_000)
        band = max(band, float(np.abs(g_penalty(inside, lo, hi)).max()))
    sec = time.perf_counter() - t0
    ok = min_err <= 1e-9 and lin_viol <= 1e-9 and band == 0.0
    m = {"min_repr_err": min_err, "linear_bound_violation": lin_viol, "max_in_band": band}
    return CriterionResult(6, "penalty properties", ok, m, sec)


def c07_hjb_sanity(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    m = {}
    ok = True
    for lo, hi, lam in ((1.0, 1.0, 0.5), (0.5, 1.5, 1.0)):
        for N in (0, 1, 2):
            v = hjb_value(LimitObjective(Payoff.constant(0.0), N, lam, lo, hi))
            target = 0.0 if N == 0 else -lo**2 / (16 * lam)
            m[f"v(lo={lo},N={N})"] = v
            ok &= abs(v - target) <= 1e-3
    sec = time.perf_counter() - t0
    return CriterionResult(7, "HJB on zero payoff", bool(ok and sec < 10), m, sec)


def count_inversions(errors) -> int:
    return int(sum(b > a for a, b in zip(errors, errors[1:])))


def c08_bachelier(seed: int = 0, n_values=(2, 4, 6, 8, 10, 12)) -> CriterionResult:
    t0 = time.perf_counter()
    bach = float(norm.pdf(0.0))
    m = {}
    ok = True
    for N in (0, 1):
        target = bach - N / (4 * 0.5)
        errs = []
        for n in n_values:
            p = ModelParams(n=n, sigma_lo=1.0, sigma_hi=1.0, lambda_cost=0.5, lookahead=N)
            errs.append(abs(superrep_price(p, Payoff.call(0.0)).price - target))
        inv = count_inversions(errs)
        m[f"err_n{n_values[-1]}_N{N}"] = errs[-1]
        m[f"inversions_N{N}"] = inv
        ok &= errs[-1] <= 0.1 and inv <= 1
    sec = time.perf_counter() - t0
    return CriterionResult(8, "discrete prices approach the Bachelier target", bool(ok and sec < 600), m, sec)


def c09_information(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    rng = _rng(seed, 9)
    worst = -math.inf
    for _ in range(12):
        params, payoff = _random_instance(rng)
        a = superrep_price(params.with_(lookahead=0), payoff)
        b = superrep_price(params.with_(lookahead=min(1, params.n)), payoff)
        worst = max(worst, b.price - a.price)
    tol = 1e-6
    gap_err = 0.0
    for lam in (0.25, 0.5, 1.0, 2.0):
        p = ModelParams(n=1, lambda_cost=lam)
        d = (superrep_price(p, Payoff.constant(1.0)).price
             - superrep_price(p.with_(lookahead=1), Payoff.constant(1.0)).price)
        gap_err = max(gap_err, abs(d - 1 / (4 * lam)))
    sec = time.perf_counter() - t0
    ok = worst <= tol and gap_err <= 1e-6
    return CriterionResult(9, "peeking never raises the price", ok, {"max_increase": worst, "n1_gap_err": gap_err}, sec)


def c10_large_lookahead(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    worst = 0.0
    for K, lo, hi, lam in ((-1.0, 1.0, 1.0, 0.5), (-0.5, 0.5, 1.0, 1.0), (-2.0, 1.0, 1.5, 0.5)):
        pay = Payoff.call(K)
        v = hjb_value(LimitObjective(pay, 64, lam, lo, hi))
        a = large_n_asymptote(pay, 0.0, lo, lam)
        worst = max(worst, abs(v - a) / abs(a))
    sec = time.perf_counter() - t0
    return CriterionResult(10, "large lookahead asymptote", worst <= 0.02 and sec < 60, {"max_rel_err": worst}, sec)


def lemma43_scan(seed: int, exponents=(8, 10, 12, 14), samples: int = 1000, lookahead: int = 1,
                 schedule: str = "anticipative", phi_range: float = 2.0):
    """Worst and mean shortfall of the block strategy for each n = 2^e."""
    out = []
    for e in exponents:
        n = 2**e
        rng = _rng(seed, 1100 + e)
        p = ModelParams(n=n, sigma_lo=0.5, sigma_hi=1.0, lookahead=lookahead, lambda_cost=0.5)
        disc = DiscretizationParams.from_payoff(Payoff.call(0.0), 0.0, 0.9, 0.5)
        vals = np.empty(samples)
        for j in range(samples):
            x = rng.choice([-1.0, 1.0], n) * rng.uniform(p.sigma_lo, p.sigma_hi, n)
            phi = rng.uniform(-phi_range, phi_range, disc.K + 1)
            psi = rng.uniform(-phi_range, phi_range, disc.K + 1)
            vals[j] = block_shortfall(p, disc, phi, psi, x, schedule=schedule)
        out.append((n, float(vals.max()), float(vals.mean())))
    return out


def c11_lemma43(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    scan = lemma43_scan(seed)
    worst = [w for _, w, _ in scan]
    monotone = all(b <= 1.1 * a for a, b in zip(worst, worst[1:]))
    rate = [math.log(n) ** 2 * n ** (-1 / 6) for n, _, _ in scan]
    C = max(w / r for w, r in zip(worst, rate))
    sec = time.perf_counter() - t0
    m = {f"shortfall_n{n}": w for n, w, _ in scan}
    m["fitted_C"] = C
    return CriterionResult(11, "block strategy shortfall decays", monotone and sec < 300, m, sec)


def mc_hjb_configs():
    return [
        (Payoff.call(0.0), 0, 0.5, 0.5, 1.0, "constant"),
        (Payoff.call(0.0), 1, 0.5, 0.5, 1.0, "feature"),
        (Payoff.call(0.3), 1, 0.5, 0.8, 1.2, "feature"),
        (Payoff.call(-0.5), 2, 1.0, 1.0, 1.0, "constant"),
        (Payoff.terminal_quadratic(Payoff.call(0.0), 0.2), 0, 0.5, 0.5, 1.0, "feature"),
    ]


def c12_mc_vs_hjb(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    worst = -math.inf
    m = {}
    for i, (pay, N, lam, lo, hi, fam) in enumerate(mc_hjb_configs()):
        obj = LimitObjective(pay, N, lam, lo, hi)
        family = constant_family(lo, hi) if fam == "constant" else feature_family(lo, hi, 0.5 * lo, 2 * hi)
        res = optimize_control(obj, family, OptimizerOptions(maxfev=60, mc=McOptions(n_paths=4096, n_steps=128,
                                                                                     seed=seed + i)))
        v = hjb_value(obj)
        excess = res.value - (v + 3 * res.stderr + 0.02)
        worst = max(worst, excess)
        m[f"cfg{i}_mc"] = res.value
        m[f"cfg{i}_hjb"] = v
    sec = time.perf_counter() - t0
    return CriterionResult(12, "optimised Monte Carlo below HJB", worst <= 0, {**m, "max_excess": worst}, sec)


CRITERIA: dict[int, Callable[[int], CriterionResult]] = {
    1: c01_one_step_insider,
    2: c02_weak_duality,
    3: c03_qn_martingale,
    4: c04_terminal_identity,
    5: c05_hamiltonian,
    6: c06_penalty,
    7: c07_hjb_sanity,
    8: c08_bachelier,
    9: c09_information,
    10: c10_large_lookahead,
    11: c11_lemma43,
    12: c12_mc_vs_hjb,
}


def run_criteria(numbers=None, seed: int = 0) -> list[CriterionResult]:
    numbers = sorted(CRITERIA) if numbers is None else numbers
    return [CRITERIA[k](seed) for k in numbers]
