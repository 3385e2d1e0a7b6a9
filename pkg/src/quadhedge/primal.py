"""Exact robust super-replication prices on finite scenario trees.

The price is ``min_gamma max_leaf f_leaf(gamma)`` with

    f_leaf(gamma) = Z_leaf - sum_i gamma_i dS_i + Lambda * sum_i (gamma_i - gamma_{i-1})^2,

a convex piecewise-quadratic problem.  The default solver is a primal-dual
interior point method on the epigraph form; its leaf multipliers are a
probability measure, and the dual objective of that measure certifies the
optimality gap independently of the solver.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .dual import MeasuredTree, dual_value_leaves
from .errors import CapExceeded, NoConvergence, ShapeMismatch, ValidationError
from .hedging import InfoIndex, Strategy, leaf_terminal_wealth
from .market import DEFAULT_NODE_CAP, ModelParams, Payoff, ScenarioTree, build_tree, info_depth


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-6
    max_iter: Optional[int] = None
    method: str = "ipm"
    cap: int = DEFAULT_NODE_CAP
    slot_cap: int = 2_000_000
    active_tol: float = 1e-7
    verbose: bool = False

    def iteration_cap(self) -> int:
        if self.max_iter is not None:
            return self.max_iter
        return 200 if self.method == "ipm" else 5000


@dataclass(frozen=True, eq=False)
class SolveReport:
    price: float
    strategy: Strategy
    iterations: int
    certified_gap: float
    worst_paths: list
    lower_bound: float
    leaf_weights: np.ndarray
    method: str
    seconds: float = field(default=0.0, compare=False)

    def measure(self) -> MeasuredTree:
        """The dual measure whose objective equals ``lower_bound``."""
        return MeasuredTree.from_leaf_probabilities(self.strategy.index.tree, self.leaf_weights)


class _Problem:
    """Leaf data and the (time-reversed) slot layout shared by the solvers."""

    def __init__(self, params: ModelParams, payoff: Payoff, tree: ScenarioTree, slot_cap: int):
        self.params = params
        self.tree = tree
        self.index = InfoIndex(tree, params.lookahead)
        self.m = self.index.n_slots
        if self.m > slot_cap:
            raise CapExceeded(self.m, slot_cap)
        self.prices = tree.leaf_prices(params.s)
        self.Z = payoff.evaluate(self.prices)
        if not np.all(np.isfinite(self.Z)):
            raise ValidationError("payoff must be finite on every leaf")
        self.dS = np.diff(self.prices, axis=1)
        # latest decisions first: an elimination order without fill-in
        self.idx = self.m - 1 - self.index.leaf_slots
        self.lam = params.lambda_cost

    def values(self, g):
        G = g[self.idx]
        D = np.diff(G, axis=1, prepend=0.0)
        f = self.Z - (G * self.dS).sum(1) + self.lam * (D * D).sum(1)
        return f, D

    def grads(self, D):
        Dn = np.zeros_like(D)
        Dn[:, :-1] = D[:, 1:]
        return -self.dS + 2 * self.lam * (D - Dn)

    def lower_bound(self, w):
        p = w / w.sum()
        return dual_value_leaves(self.tree, p, self.prices, self.Z, self.params.lookahead, self.lam), p

    def strategy(self, g) -> Strategy:
        return Strategy(self.index, g[::-1].copy())


def _worst(tree, f, tol):
    F = f.max()
    hit = np.flatnonzero(f >= F - tol * max(1.0, abs(F)))
    return [int(tree.offsets[-1] + j) for j in hit]


def _solve_ipm(prob: _Problem, opts: SolverOptions):
    L, n = prob.idx.shape
    m, lam = prob.m, prob.lam
    T = 2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    T[-1, -1] = 1.0
    Tb = np.zeros((n + 1, n + 1))
    Tb[:n, :n] = 2 * lam * T
    idxy = np.concatenate([prob.idx, np.full((L, 1), m)], axis=1)
    flat = idxy.ravel()
    rows = np.repeat(idxy[:, :, None], n + 1, axis=2).ravel()
    cols = np.repeat(idxy[:, None, :], n + 1, axis=1).ravel()

    g = np.zeros(m)
    f, D = prob.values(g)
    y = f.max() + 1.0
    s = y - f
    w = np.full(L, 1.0 / L)
    best = (math.inf, g, w)
    for it in range(opts.iteration_cap()):
        f, D = prob.values(g)
        F = float(f.max())
        lb, _ = prob.lower_bound(w)
        gap = F - lb
        if gap < best[0]:
            best = (gap, g.copy(), w.copy())
        if opts.verbose:
            print(f"ipm {it}: upper {F:.10f} lower {lb:.10f} gap {gap:.2e}")
        if gap <= opts.tol:
            return g, w, it, F, lb
        J = np.concatenate([prob.grads(D), -np.ones((L, 1))], axis=1)
        rd = np.bincount(flat, (w[:, None] * J).ravel(), minlength=m + 1)
        rd[m] += 1.0
        rp = f - y + s
        mu = float(w @ s) / L
        ws = w / s
        blocks = w[:, None, None] * Tb[None] + ws[:, None, None] * J[:, :, None] * J[:, None, :]
        H = sp.csc_matrix((blocks.ravel(), (rows, cols)), shape=(m + 1, m + 1))
        try:
            lu = sla.splu(H, permc_spec="NATURAL", diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
        except RuntimeError:
            H = H + 1e-12 * sp.identity(m + 1, format="csc")
            lu = sla.splu(H, permc_spec="MMD_AT_PLUS_A")

        def direction(rc):
            rhs = -rd - np.bincount(flat, ((ws * (rp - rc / w))[:, None] * J).ravel(), minlength=m + 1)
            dz = lu.solve(rhs)
            dl = ws * ((J * dz[idxy]).sum(1) + rp - rc / w)
            ds = -(rc + s * dl) / w
            return dz, dl, ds

        def maxstep(v, dv):
            neg = dv < 0
            return min(1.0, float((-v[neg] / dv[neg]).min())) if neg.any() else 1.0

        dz, dl, ds = direction(w * s)
        a_aff = min(maxstep(s, ds), maxstep(w, dl))
        mu_aff = float((w + a_aff * dl) @ (s + a_aff * ds)) / L
        center = (mu_aff / mu) ** 3
        dz, dl, ds = direction(w * s + dl * ds - center * mu)
        a = 0.99 * min(maxstep(s, ds), maxstep(w, dl))
        if not np.all(np.isfinite(dz)) or a <= 0:
            break
        g = g + a * dz[:m]
        y = y + a * dz[m]
        w = w + a * dl
        s = s + a * ds
    raise NoConvergence(opts.iteration_cap(), best[0])


def _simplex_qp(c, Gm, u, iters=400):
    """max_a a.c - |G^T a|^2/(2u) over the simplex, by accelerated projected gradient."""
    from .dual import _project_rows

    b = len(c)
    Q = Gm @ Gm.T / u
    Lq = max(np.linalg.eigvalsh(Q).max(), 1e-12) if b > 1 else max(Q[0, 0], 1e-12)
    a = np.full(b, 1.0 / b)
    z, t = a.copy(), 1.0
    for _ in range(iters):
        a_new = _project_rows((z + (c - Q @ z) / Lq)[None])[0]
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        z = a_new + (t - 1) / t_new * (a_new - a)
        a, t = a_new, t_new
    return a


def _solve_bundle(prob: _Problem, opts: SolverOptions, max_cuts: int = 60):
    """Proximal bundle with exact worst-leaf separation and cut aggregation."""
    L, n = prob.idx.shape
    m = prob.m
    center = np.zeros(m)
    f, D = prob.values(center)
    Fc = float(f.max())
    u = 1.0
    cuts_c, cuts_g, cuts_leaf = [], [], []

    def add_cut(x, fx, Dx):
        j = int(np.argmax(fx))
        gl = np.zeros(m)
        np.add.at(gl, prob.idx[j], prob.grads(Dx)[j])
        cuts_c.append(float(fx[j] - gl @ x))
        cuts_g.append(gl)
        cuts_leaf.append(j)

    add_cut(center, f, D)
    weights = np.zeros(L)
    weights[cuts_leaf[0]] = 1.0
    best = (math.inf, center, weights)
    for it in range(opts.iteration_cap()):
        Gm = np.array(cuts_g)
        cvec = np.array(cuts_c) + Gm @ center
        alpha = _simplex_qp(cvec, Gm, u)
        agg = alpha @ Gm
        x = center - agg / u
        # cut model at the trial point (the prox term excluded)
        model = float(alpha @ cvec - agg @ agg / u)
        fx, Dx = prob.values(x)
        Fx = float(fx.max())
        weights = np.zeros(L)
        np.add.at(weights, np.array(cuts_leaf), alpha)
        lb, _ = prob.lower_bound(np.maximum(weights, 1e-300))
        if Fx < Fc:
            best_upper = Fx
        else:
            best_upper = Fc
        gap = best_upper - lb
        if gap < best[0]:
            best = (gap, (x if Fx < Fc else center).copy(), weights.copy())
        if opts.verbose and it % 50 == 0:
            print(f"bundle {it}: upper {best_upper:.8f} lower {lb:.8f} gap {gap:.2e}")
        if gap <= opts.tol:
            return best[1], best[2], it, best_upper, lb
        pred = Fc - model
        if pred > 0 and Fc - Fx >= 0.1 * pred:
            center, Fc = x, Fx
            u = max(u * 0.5, 1e-6)
        else:
            u = min(u * 2.0, 1e8)
        add_cut(x, fx, Dx)
        # keep active cuts plus the newest, folding the rest into one aggregate
        if len(cuts_c) > max_cuts:
            keep = [k for k in range(len(alpha)) if alpha[k] > 1e-10][-(max_cuts - 2):]
            keep_set = set(keep) | {len(cuts_c) - 1}
            new_c = [cuts_c[k] for k in sorted(keep_set)]
            new_g = [cuts_g[k] for k in sorted(keep_set)]
            new_l = [cuts_leaf[k] for k in sorted(keep_set)]
            cuts_c, cuts_g, cuts_leaf = new_c, new_g, new_l
    raise NoConvergence(opts.iteration_cap(), best[0])


def superrep_price(params: ModelParams, payoff: Payoff, opts: Optional[SolverOptions] = None,
                   tree: Optional[ScenarioTree] = None) -> SolveReport:
    """Super-replication price with an optimality certificate.

    ``price`` is the worst-case shortfall of the returned strategy (an upper
    bound) and ``price - certified_gap`` is the dual objective of the
    returned leaf weights (a lower bound).
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    tree = tree if tree is not None else build_tree(params, cap=opts.cap)
    if tree.depth != params.n:
        raise ShapeMismatch("tree depth differs from params.n")
    prob = _Problem(params, payoff, tree, opts.slot_cap)
    if opts.method == "ipm":
        g, w, it, F, lb = _solve_ipm(prob, opts)
    elif opts.method == "bundle":
        g, w, it, F, lb = _solve_bundle(prob, opts)
    else:
        raise ValidationError(f"unknown method {opts.method!r}")
    f, _ = prob.values(g)
    F = float(f.max())
    lb, p = prob.lower_bound(w)
    return SolveReport(
        price=F,
        strategy=prob.strategy(g),
        iterations=it,
        certified_gap=max(F - lb, 0.0),
        worst_paths=_worst(tree, f, opts.active_tol),
        lower_bound=lb,
        leaf_weights=p,
        method=opts.method,
        seconds=time.perf_counter() - t0,
    )


def verify_superhedge(params: ModelParams, payoff: Payoff, strategy: Strategy, y: float) -> float:
    """``max_leaf (Z - y - Y_n)``; a value ``<= 0`` certifies a super-hedge from capital ``y``."""
    if strategy.index.n != params.n or strategy.index.lookahead != params.lookahead:
        raise ShapeMismatch("strategy does not match params (horizon or lookahead)")
    tree = strategy.index.tree
    Z = payoff.evaluate(tree.leaf_prices(params.s))
    return float(np.max(Z - y - leaf_terminal_wealth(params, strategy)))


def superrep_bruteforce(params: ModelParams, payoff: Payoff, position_grid: Sequence[float],
                        cap: int = 200_000) -> float:
    """Exact minimax over strategies whose positions all lie on ``position_grid``.

    Dynamic programming over information nodes: for a node ``u`` observed
    at time ``i`` and previous position ``g``,

        V_i(u, g) = min_c  Lambda (c - g)^2 + max_{u'} [ -c dS_{i+1}(u') + V_{i+1}(u', c) ]

    where ``u'`` runs over the information nodes of time ``i + 1`` below ``u``.
    """
    if params.n > 3:
        raise ValidationError("the brute-force oracle is limited to n <= 3")
    grid = np.asarray(sorted(set(float(v) for v in position_grid)))
    hits = np.flatnonzero(np.abs(grid) < 1e-12)
    if hits.size == 0:
        raise ValidationError("position_grid must contain 0 (the position before the first trade)")
    zero = int(hits[0])
    tree = build_tree(params, cap=cap)
    n, N, lam = params.n, params.lookahead, params.lambda_cost
    prices = [params.s + np.zeros(1)]
    for d in range(1, n + 1):
        prices.append(prices[-1][tree.parents[d]] + tree.returns[d] / math.sqrt(n))
    Z = payoff.evaluate(tree.leaf_prices(params.s))
    anc = tree.leaf_ancestors
    cost = lam * (grid[:, None] - grid[None, :]) ** 2  # [c, g]

    def descend(level_from, level_to, values_to):
        """Max over descendants at level_to for each node at level_from."""
        idx = np.arange(tree.level_sizes[level_to])
        for d in range(level_to, level_from, -1):
            idx = tree.parents[d][idx]
        out = np.full((tree.level_sizes[level_from],) + values_to.shape[1:], -np.inf)
        np.maximum.at(out, idx, values_to)
        return out

    V = np.repeat(Z[:, None], len(grid), axis=1)  # V_n(leaf, g)
    level_next = n
    for i in range(n - 1, -1, -1):
        d = info_depth(i, N, n)
        # nodes at the info level of time i+1 (or the leaves when i = n-1)
        d_next = level_next
        # price step i -> i+1 seen from nodes at d_next
        idx = np.arange(tree.level_sizes[d_next])
        depth_nodes = {d_next: idx}
        for e in range(d_next, 0, -1):
            idx = tree.parents[e][idx]
            depth_nodes[e - 1] = idx
        dS = prices[i + 1][depth_nodes[i + 1]] - prices[i][depth_nodes[i]]
        inner = V - dS[:, None] * grid[None, :]         # [u', c]
        W = descend(d, d_next, inner) if d < d_next else inner
        # V_i(u, g) = min_c cost[c, g] + W[u, c]
        V = (W[:, :, None] + cost[None, :, :]).min(axis=1)
        level_next = d
    # no decision before the first trade: the adversary picks the node observed at time 0
    return float(V[:, zero].max())
