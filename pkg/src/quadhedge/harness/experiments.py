"""Experiment runners.  Each returns a :class:`ResultTable` with a fixed column schema."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from ..controls import VolControl, constant_family, feature_family
from ..dual import MeasuredTree, dual_search, dual_value, qn_from_control
from ..errors import QuadHedgeError, ValidationError
from ..limit import (
    HjbGrid,
    LimitObjective,
    McOptions,
    OptimizerOptions,
    bachelier_call,
    hjb_value,
    insider_value,
    mc_lower_bound,
    optimize_control,
)
from ..market import ModelParams, build_tree
from ..primal import SolverOptions, superrep_price
from .acceptance import count_inversions, lemma43_scan, run_criteria
from .config import ExperimentSpec, RunConfig, model_from_spec, payoff_from_spec

# CSV schemas, one per experiment kind
SCHEMAS = {
    "price-discrete": ("n", "lookahead", "sigma_lo", "sigma_hi", "lambda_cost", "grid_k", "payoff", "price",
                       "lower_bound", "certified_gap", "iterations", "leaves", "positions", "op", "opts_hash"),
    "dual-bound": ("n", "lookahead", "measure", "sample", "dual_value", "price", "certified_gap", "slack",
                   "op", "opts_hash"),
    "limit-hjb": ("lookahead", "nx", "nt", "q_cap", "value", "op", "opts_hash"),
    "limit-mc": ("lookahead", "family", "value", "stderr", "in_sample", "evaluations", "hjb_value", "excess",
                 "op", "opts_hash"),
    "insider-value": ("n", "lookahead", "price", "price_no_insider", "difference", "minus_N_over_4lambda",
                      "limit_v_N", "limit_v0_adjusted", "limit_difference", "op", "opts_hash"),
    "lemma43-decay": ("n", "lookahead", "schedule", "samples", "max_shortfall", "mean_shortfall",
                      "scaled_max", "op", "opts_hash"),
    "convergence": ("n", "lookahead", "price", "certified_gap", "bachelier_target", "hjb_value",
                    "err_target", "err_hjb", "op", "opts_hash"),
    "acceptance": ("criterion", "name", "passed", "metrics", "op", "opts_hash"),
}


@dataclass
class ResultTable:
    kind: str
    name: str
    columns: tuple
    rows: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    opts_hash: str = ""

    def add(self, op: str, **values):
        row = {**values, "op": op, "opts_hash": self.opts_hash}
        missing = set(self.columns) - set(row)
        if missing:
            raise ValidationError(f"row for {self.kind} lacks {sorted(missing)}")
        self.rows.append(tuple(row[c] for c in self.columns))


class StageError(QuadHedgeError):
    """Wraps a module error with the name of the experiment that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _ladder(opts, key, default):
    v = opts.get(key, default)
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _solver(opts) -> SolverOptions:
    return SolverOptions(tol=float(opts.get("tol", 1e-6)), method=opts.get("method", "ipm"),
                         max_iter=opts.get("max_iter"))


def _objective(model: ModelParams, payoff, lookahead=None) -> LimitObjective:
    return LimitObjective(payoff, model.lookahead if lookahead is None else lookahead, model.lambda_cost,
                          model.sigma_lo, model.sigma_hi, model.s)


def _grid(opts, model: ModelParams, nx=None) -> HjbGrid:
    return HjbGrid.around(model.s, model.sigma_hi, nx=int(nx or opts.get("nx", 201)),
                          width=float(opts.get("width", 8.0)), q_cap=float(opts.get("q_cap", 50.0)),
                          nt=int(opts["nt"]) if "nt" in opts else None)


def run_price_discrete(spec, cfg, table):
    base = model_from_spec(spec.model)
    payoff = payoff_from_spec(spec.payoff)
    for n in _ladder(spec.options, "n_values", base.n):
        for N in _ladder(spec.options, "lookaheads", base.lookahead):
            p = base.with_(n=int(n), lookahead=int(min(N, n)))
            t0 = time.perf_counter()
            rep = superrep_price(p, payoff, _solver(spec.options))
            table.timings[f"n={n},N={N}"] = time.perf_counter() - t0
            table.add("superrep_price", n=p.n, lookahead=p.lookahead, sigma_lo=p.sigma_lo, sigma_hi=p.sigma_hi,
                      lambda_cost=p.lambda_cost, grid_k=p.grid_k, payoff=payoff.label, price=rep.price,
                      lower_bound=rep.lower_bound, certified_gap=rep.certified_gap, iterations=rep.iterations,
                      leaves=rep.strategy.index.tree.n_leaves, positions=rep.strategy.index.n_slots)


def _control_from_spec(spec: dict, model: ModelParams) -> VolControl:
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return VolControl.constant(float(spec.get("value", model.sigma_hi)), sigma_hi=model.sigma_hi)
    if kind == "feature":
        return VolControl(base=float(spec.get("base", model.sigma_hi)), coef=tuple(spec.get("coef", (0, 0, 0))),
                          clamp_lo=float(spec.get("clamp_lo", model.sigma_lo)),
                          clamp_hi=float(spec.get("clamp_hi", model.sigma_hi)), sigma_hi=model.sigma_hi,
                          delta=float(spec.get("delta", 0.05)), ramp=float(spec.get("ramp", 0.05)),
                          window=float(spec.get("window", 0.1)))
    raise ValidationError(f"unknown control kind {kind!r}")


def run_dual_bound(spec, cfg, table):
    base = model_from_spec(spec.model)
    payoff = payoff_from_spec(spec.payoff)
    opts = spec.options
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 17])))
    measures = _ladder(opts, "measures", ["uniform", "random", "search"])
    for n in _ladder(opts, "n_values", base.n):
        for N in _ladder(opts, "lookaheads", base.lookahead):
            p = base.with_(n=int(n), lookahead=int(min(N, n)))
            rep = superrep_price(p, payoff, _solver(opts))
            tree = rep.strategy.index.tree

            def row(kind, j, val, op):
                table.add(op, n=p.n, lookahead=p.lookahead, measure=kind, sample=j, dual_value=val,
                          price=rep.price, certified_gap=rep.certified_gap,
                          slack=rep.price + rep.certified_gap - val)

            if "uniform" in measures:
                row("uniform", 0, dual_value(p, payoff, MeasuredTree.uniform(tree)), "dual_value")
            if "random" in measures:
                for j in range(int(opts.get("n_random", 5))):
                    mt = MeasuredTree.random(tree, rng, concentration=float(opts.get("concentration", 1.0)))
                    row("random", j, dual_value(p, payoff, mt), "dual_value")
            if "search" in measures:
                _, val = dual_search(p, payoff, MeasuredTree.uniform(tree))
                row("search", 0, val, "dual_search")
            if "solver" in measures:
                row("solver", 0, dual_value(p, payoff, rep.measure()), "dual_value")
            if "qn" in measures:
                ctl = _control_from_spec(opts.get("control", {}), p)
                mt, qrep = qn_from_control(p, ctl, strict=False)
                if mt is not None:
                    row("qn", 0, dual_value(p, payoff, mt), "qn_from_control")
    slacks = [r[table.columns.index("slack")] for r in table.rows]
    table.verdicts["weak_duality"] = all(s >= -1e-8 for s in slacks)


def run_limit_hjb(spec, cfg, table):
    base = model_from_spec(spec.model)
    payoff = payoff_from_spec(spec.payoff)
    values = {}
    for N in _ladder(spec.options, "lookaheads", base.lookahead):
        for nx in _ladder(spec.options, "nx_values", [201, 401, 801]):
            grid = _grid(spec.options, base, nx)
            t0 = time.perf_counter()
            v = hjb_value(_objective(base, payoff, int(N)), grid)
            table.timings[f"N={N},nx={nx}"] = time.perf_counter() - t0
            values.setdefault(N, []).append(v)
            table.add("hjb_value", lookahead=int(N), nx=int(nx), nt=grid.steps(base.sigma_hi, base.lambda_cost),
                      q_cap=grid.q_cap, value=v)
    tol = float(spec.options.get("ladder_tol", 1e-2))
    table.verdicts["ladder_stable"] = all(len(v) < 2 or abs(v[-1] - v[-2]) <= tol for v in values.values())


def run_limit_mc(spec, cfg, table):
    base = model_from_spec(spec.model)
    payoff = payoff_from_spec(spec.payoff)
    opts = spec.options
    mc = McOptions(n_paths=int(opts.get("n_paths", 8192)), n_steps=int(opts.get("n_steps", 128)),
                   seed=cfg.seed, threads=cfg.threads)
    ok = True
    for N in _ladder(opts, "lookaheads", base.lookahead):
        obj = _objective(base, payoff, int(N))
        fam_name = opts.get("family", "feature")
        t0 = time.perf_counter()
        if fam_name == "fixed":
            est = mc_lower_bound(obj, _control_from_spec(opts.get("control", {}), base), mc)
            value, stderr, in_sample, nfev = est.estimate, est.stderr, est.estimate, 1
        else:
            if fam_name == "constant":
                family = constant_family(base.sigma_lo, base.sigma_hi)
            elif fam_name == "feature":
                family = feature_family(base.sigma_lo, base.sigma_hi,
                                        float(opts.get("clamp_lo", 0.5 * base.sigma_lo)),
                                        float(opts.get("clamp_hi", 2.0 * base.sigma_hi)))
            else:
                raise ValidationError(f"unknown family {fam_name!r}")
            res = optimize_control(obj, family, OptimizerOptions(maxfev=int(opts.get("maxfev", 60)), mc=mc))
            value, stderr, in_sample, nfev = res.value, res.stderr, res.in_sample, res.nfev
        table.timings[f"N={N}"] = time.perf_counter() - t0
        v = hjb_value(obj, _grid(opts, base)) if payoff.markovian else math.nan
        excess = value - (v + 3 * stderr + 0.02) if payoff.markovian else math.nan
        ok &= not excess > 0
        table.add("mc_lower_bound", lookahead=int(N), family=fam_name, value=value, stderr=stderr,
                  in_sample=in_sample, evaluations=nfev, hjb_value=v, excess=excess)
    table.verdicts["mc_below_hjb"] = bool(ok)


def run_insider_value(spec, cfg, table):
    base = model_from_spec(spec.model)
    payoff = payoff_from_spec(spec.payoff)
    opts = spec.options
    lookaheads = [int(N) for N in _ladder(opts, "lookaheads", [1])]
    limit = {}
    if payoff.markovian and opts.get("limit", True):
        for N in lookaheads:
            limit[N] = insider_value(_objective(base, payoff, N), _grid(opts, base))
    monotone = True
    for n in _ladder(opts, "n_values", base.n):
        p0 = base.with_(n=int(n), lookahead=0)
        r0 = superrep_price(p0, payoff, _solver(opts))
        for N in lookaheads:
            pN = p0.with_(lookahead=min(N, int(n)))
            rN = superrep_price(pN, payoff, _solver(opts))
            monotone &= rN.price <= r0.price + rN.certified_gap + r0.certified_gap
            lv = limit.get(N)
            table.add("superrep_price", n=int(n), lookahead=pN.lookahead, price=rN.price,
                      price_no_insider=r0.price, difference=rN.price - r0.price,
                      minus_N_over_4lambda=-pN.lookahead / (4 * base.lambda_cost),
                      limit_v_N=lv.v_N if lv else math.nan, limit_v0_adjusted=lv.v_0_adjusted if lv else math.nan,
                      limit_difference=lv.difference if lv else math.nan)
    table.verdicts["information_monotone"] = bool(monotone)


def run_lemma43(spec, cfg, table):
    opts = spec.options
    exps = [int(e) for e in _ladder(opts, "exponents", [8, 10, 12, 14])]
    N = int(opts.get("lookahead", spec.model.get("lookahead", 1)))
    sched = opts.get("schedule", "anticipative")
    samples = int(opts.get("samples", 1000))
    scan = lemma43_scan(cfg.seed, exps, samples, N, sched, float(opts.get("phi_range", 2.0)))
    worst = []
    for n, w, mean in scan:
        worst.append(w)
        table.add("insider_block_strategy", n=n, lookahead=N, schedule=sched, samples=samples, max_shortfall=w,
                  mean_shortfall=mean, scaled_max=w / (math.log(n) ** 2 * n ** (-1 / 6)))
    table.verdicts["nonincreasing"] = all(b <= 1.1 * a for a, b in zip(worst, worst[1:]))


def run_convergence(spec, cfg, table):
    base = model_from_spec(spec.model)
    payoff = payoff_from_spec(spec.payoff)
    opts = spec.options
    for N in _ladder(opts, "lookaheads", [0, 1]):
        N = int(N)
        hv = hjb_value(_objective(base, payoff, N), _grid(opts, base)) if payoff.markovian else math.nan
        target = math.nan
        if payoff.kind == "call" and base.sigma_lo == base.sigma_hi:
            target = bachelier_call(base.s, payoff.strike, base.sigma_hi) - N * base.sigma_hi**2 / (4 * base.lambda_cost)
        errs = []
        for n in _ladder(opts, "n_values", [2, 4, 6, 8, 10, 12]):
            p = base.with_(n=int(n), lookahead=min(N, int(n)))
            t0 = time.perf_counter()
            rep = superrep_price(p, payoff, _solver(opts))
            table.timings[f"n={n},N={N}"] = time.perf_counter() - t0
            errs.append(abs(rep.price - target))
            table.add("superrep_price", n=int(n), lookahead=N, price=rep.price, certified_gap=rep.certified_gap,
                      bachelier_target=target, hjb_value=hv, err_target=errs[-1], err_hjb=abs(rep.price - hv))
        if not math.isnan(target):
            table.verdicts[f"bachelier_N{N}"] = bool(errs[-1] <= 0.1 and count_inversions(errs) <= 1)


def run_acceptance(spec, cfg, table):
    numbers = spec.options.get("criteria")
    for res in run_criteria(numbers, seed=cfg.seed):
        metrics = ";".join(f"{k}={v!r}" if not isinstance(v, float) else f"{k}={v:.12g}"
                           for k, v in res.metrics.items() if not k.startswith("seconds"))
        table.add("acceptance", criterion=res.number, name=res.name, passed=res.passed, metrics=metrics)
        table.verdicts[f"criterion_{res.number}"] = res.passed
        table.timings[f"criterion_{res.number}"] = res.seconds


RUNNERS: dict[str, Callable] = {
    "price-discrete": run_price_discrete,
    "dual-bound": run_dual_bound,
    "limit-hjb": run_limit_hjb,
    "limit-mc": run_limit_mc,
    "insider-value": run_insider_value,
    "lemma43-decay": run_lemma43,
    "convergence": run_convergence,
    "acceptance": run_acceptance,
}


def run(config: RunConfig) -> list[ResultTable]:
    """Run every experiment of the config in order."""
    tables = []
    for spec in config.experiments:
        table = ResultTable(spec.kind, spec.name, SCHEMAS[spec.kind], opts_hash=spec.hash)
        try:
            RUNNERS[spec.kind](spec, config, table)
        except QuadHedgeError as exc:
            raise StageError(spec.name, exc) from exc
        tables.append(table)
    return tables
