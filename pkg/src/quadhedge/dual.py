"""Dual lower bounds on measured trees and martingale measures built from controls.

For any probability measure on the scenarios the super-replication price is
bounded below by

    E[Z] - 1/(4 Lambda) * sum_i E[(E[S_n | G_i] - S_i)^2],

where ``G_i`` reveals the first ``min(i + N, n)`` returns.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .controls import VolControl
from .errors import CapExceeded, InvalidMeasure, InvalidProbability, ShapeMismatch, ValidationError
from .market import ModelParams, Payoff, ScenarioTree, build_tree, check_in_omega, info_depth

PROB_TOL = 1e-12
CHUNK = 4096


@dataclass(frozen=True, eq=False)
class MeasuredTree:
    """A scenario tree with one conditional probability per child.

    ``cond[d][j]`` is the probability of moving from the parent of node ``j``
    (level ``d``) to that node; ``cond[0]`` is ``[1.0]``.
    """

    tree: ScenarioTree
    cond: tuple

    def __post_init__(self):
        t = self.tree
        if len(self.cond) != t.depth + 1:
            raise ShapeMismatch("need one probability array per level")
        cond = tuple(np.asarray(c, dtype=float) for c in self.cond)
        for d, c in enumerate(cond):
            if c.shape != (t.level_sizes[d],):
                raise ShapeMismatch(f"level {d}: expected {t.level_sizes[d]} probabilities")
            if np.any(~np.isfinite(c)) or np.any(c < -PROB_TOL) or np.any(c > 1 + PROB_TOL):
                raise InvalidMeasure(f"level {d}: probabilities must lie in [0, 1]")
            if d:
                sums = np.bincount(t.parents[d], c, minlength=t.level_sizes[d - 1])
                if np.any(np.abs(sums - 1) > PROB_TOL):
                    bad = int(np.argmax(np.abs(sums - 1)))
                    raise InvalidMeasure(f"children of node {t.node_id(d - 1, bad)} sum to {sums[bad]!r}")
        if abs(cond[0][0] - 1) > PROB_TOL:
            raise InvalidMeasure("root probability must be 1")
        object.__setattr__(self, "cond", cond)

    @classmethod
    def uniform(cls, tree: ScenarioTree) -> "MeasuredTree":
        cond = [np.ones(1)]
        for d in range(1, tree.depth + 1):
            counts = np.bincount(tree.parents[d], minlength=tree.level_sizes[d - 1])
            cond.append(1.0 / counts[tree.parents[d]])
        return cls(tree, tuple(cond))

    @classmethod
    def random(cls, tree: ScenarioTree, rng: np.random.Generator, concentration: float = 1.0) -> "MeasuredTree":
        cond = [np.ones(1)]
        for d in range(1, tree.depth + 1):
            w = rng.gamma(concentration, size=tree.level_sizes[d])
            tot = np.bincount(tree.parents[d], w, minlength=tree.level_sizes[d - 1])
            cond.append(w / tot[tree.parents[d]])
        return cls(tree, tuple(_renormalize(tree, cond)))

    @classmethod
    def from_leaf_probabilities(cls, tree: ScenarioTree, p: np.ndarray) -> "MeasuredTree":
        p = np.asarray(p, dtype=float)
        if p.shape != (tree.n_leaves,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise InvalidMeasure("leaf probabilities must be a distribution over the leaves")
        p = p / p.sum()
        mass = [None] * (tree.depth + 1)
        mass[-1] = p
        for d in range(tree.depth, 0, -1):
            mass[d - 1] = np.bincount(tree.parents[d], mass[d], minlength=tree.level_sizes[d - 1])
        cond = [np.ones(1)]
        for d in range(1, tree.depth + 1):
            pm = mass[d - 1][tree.parents[d]]
            counts = np.bincount(tree.parents[d], minlength=tree.level_sizes[d - 1])[tree.parents[d]]
            with np.errstate(invalid="ignore", divide="ignore"):
                c = np.where(pm > 0, mass[d] / pm, 1.0 / counts)
            cond.append(c)
        return cls(tree, tuple(_renormalize(tree, cond)))

    @cached_property
    def node_probabilities(self) -> tuple:
        out = [self.cond[0]]
        for d in range(1, self.tree.depth + 1):
            out.append(out[-1][self.tree.parents[d]] * self.cond[d])
        return tuple(out)

    @property
    def leaf_probabilities(self) -> np.ndarray:
        return self.node_probabilities[-1]

    def check_returns(self, params: ModelParams) -> None:
        for d in range(1, self.tree.depth + 1):
            check_in_omega(params, self.tree.returns[d])

    def to_text(self) -> str:
        """One line ``node_id parent_id return probability`` per node, breadth first."""
        lines = []
        probs = np.concatenate(self.cond)
        for (nid, pid, x) in self.tree.edges():
            lines.append(f"{nid} {pid} {x!r} {float(probs[nid])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MeasuredTree":
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        if not rows or any(len(r) != 4 for r in rows):
            raise ValidationError("each line needs: node_id parent_id return probability")
        ids = np.array([int(r[0]) for r in rows])
        par = np.array([int(r[1]) for r in rows])
        ret = np.array([float(r[2]) for r in rows])
        prob = np.array([float(r[3]) for r in rows])
        if not np.array_equal(ids, np.arange(len(rows))) or par[0] != -1:
            raise ValidationError("node ids must be 0..m-1 in breadth-first order with root first")
        depth = np.zeros(len(rows), dtype=np.int64)
        for i in range(1, len(rows)):
            if not 0 <= par[i] < i:
                raise ValidationError(f"node {i}: parent must precede it")
            depth[i] = depth[par[i]] + 1
        if np.any(np.diff(depth) < 0):
            raise ValidationError("nodes must be listed level by level")
        n = int(depth.max())
        if np.any(depth[ids[depth == n]] != n) or n == 0:
            raise ValidationError("tree needs depth >= 1")
        parents, returns, cond = [], [], []
        for d in range(n + 1):
            sel = np.flatnonzero(depth == d)
            start_prev = np.flatnonzero(depth == d - 1)[0] if d else 0
            parents.append(par[sel] - start_prev if d else np.array([-1]))
            returns.append(ret[sel] if d else np.array([0.0]))
            cond.append(prob[sel])
        leaves_ok = all(np.isin(np.flatnonzero(depth == d), par).all() for d in range(n))
        if not leaves_ok:
            raise ValidationError("every leaf must sit at the full depth")
        return cls(ScenarioTree(tuple(parents), tuple(returns)), tuple(cond))


def _renormalize(tree, cond):
    out = [np.asarray(cond[0], dtype=float)]
    for d in range(1, tree.depth + 1):
        c = np.asarray(cond[d], dtype=float)
        tot = np.bincount(tree.parents[d], c, minlength=tree.level_sizes[d - 1])
        out.append(c / tot[tree.parents[d]])
    return out


# ---------------------------------------------------------------------------
# dual objective


def _penalty_terms(tree: ScenarioTree, p: np.ndarray, prices: np.ndarray, lookahead: int):
    """Per-time lists of (node index at info depth, mass, E[p (S_n - S_i)]) aggregates."""
    n = tree.depth
    anc = tree.leaf_ancestors
    out = []
    for i in range(n):
        a = anc[:, info_depth(i, lookahead, n)]
        size = tree.level_sizes[info_depth(i, lookahead, n)]
        a_i = prices[:, -1] - prices[:, i]
        out.append((a, np.bincount(a, p, minlength=size), np.bincount(a, p * a_i, minlength=size), a_i))
    return out


def dual_value_leaves(tree: ScenarioTree, p: np.ndarray, prices: np.ndarray, Z: np.ndarray,
                      lookahead: int, lambda_cost: float) -> float:
    """Dual objective for leaf probabilities ``p`` on a tree with given leaf prices and payoffs."""
    pen = 0.0
    for a, mass, num, _ in _penalty_terms(tree, p, prices, lookahead):
        ok = mass > 0
        pen += float(np.sum(num[ok] ** 2 / mass[ok]))
    return float(p @ Z) - pen / (4 * lambda_cost)


def _dual_gradient(tree, p, prices, Z, lookahead, lambda_cost):
    """Gradient of the dual objective with respect to the leaf probabilities."""
    grad = Z.astype(float).copy()
    for a, mass, num, a_i in _penalty_terms(tree, p, prices, lookahead):
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(mass > 0, num / mass, 0.0)
        cm = m[a]
        grad -= (2 * cm * a_i - cm * cm) / (4 * lambda_cost)
    return grad


def _check_measure(params: ModelParams, measure: MeasuredTree):
    if measure.tree.depth != params.n:
        raise ShapeMismatch(f"measure tree has depth {measure.tree.depth}, params.n = {params.n}")
    measure.check_returns(params)


def dual_value(params: ModelParams, payoff: Payoff, measure: MeasuredTree) -> float:
    """Exact dual objective of ``measure`` (a lower bound on the super-replication price)."""
    _check_measure(params, measure)
    prices = measure.tree.leaf_prices(params.s)
    Z = payoff.evaluate(prices)
    return dual_value_leaves(measure.tree, measure.leaf_probabilities, prices, Z,
                             params.lookahead, params.lambda_cost)


# ---------------------------------------------------------------------------
# best-effort dual maximisation


@dataclass(frozen=True)
class DualSearchOptions:
    max_sweeps: int = 200
    tol: float = 1e-12
    step: float = 1.0
    max_halvings: int = 40
    cap: int = 200_000


def _project_rows(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row onto the probability simplex."""
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1
    k = np.arange(1, v.shape[1] + 1)
    cond = u - css / k > 0
    rho = v.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(len(v)), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def _project_groups(tree: ScenarioTree, d: int, q: np.ndarray) -> np.ndarray:
    start = tree.child_start[d - 1]
    sizes = np.diff(start)
    out = np.empty_like(q)
    for b in np.unique(sizes):
        groups = np.flatnonzero(sizes == b)
        cols = start[groups][:, None] + np.arange(b)[None, :]
        out[cols] = _project_rows(q[cols])
    return out


def dual_search(params: ModelParams, payoff: Payoff, init: MeasuredTree,
                opts: Optional[DualSearchOptions] = None) -> tuple[MeasuredTree, float]:
    """Block coordinate ascent on the conditional probabilities, one tree level at a time.

    Every accepted step increases the objective, so the result is never worse
    than ``init``; it need not be a global maximum.
    """
    opts = opts or DualSearchOptions()
    _check_measure(params, init)
    tree = init.tree
    if tree.n_nodes > opts.cap:
        raise CapExceeded(tree.n_nodes, opts.cap)
    n = tree.depth
    prices = tree.leaf_prices(params.s)
    Z = payoff.evaluate(prices)
    anc = tree.leaf_ancestors
    args = (prices, Z, params.lookahead, params.lambda_cost)

    cond = [c.copy() for c in init.cond]

    def leaf_p(cs):
        p = np.ones(tree.n_leaves)
        for d in range(1, n + 1):
            p *= cs[d][anc[:, d]]
        return p

    best = dual_value_leaves(tree, leaf_p(cond), *args)
    steps = [opts.step] * (n + 1)
    for _ in range(opts.max_sweeps):
        start_val = best
        for d in range(1, n + 1):
            p = leaf_p(cond)
            g_leaf = _dual_gradient(tree, p, *args)
            # d p_leaf / d cond[d][c] = p_leaf / cond[d][c] for leaves below c
            below = np.ones(tree.n_leaves)
            for e in range(d + 1, n + 1):
                below *= cond[e][anc[:, e]]
            reach = np.ones(tree.n_leaves)
            for e in range(1, d):
                reach *= cond[e][anc[:, e]]
            g = np.bincount(anc[:, d], reach * below * g_leaf, minlength=tree.level_sizes[d])
            t = steps[d]
            for _h in range(opts.max_halvings):
                trial = list(cond)
                trial[d] = _project_groups(tree, d, cond[d] + t * g)
                val = dual_value_leaves(tree, leaf_p(trial), *args)
                if val > best:
                    cond, best = trial, val
                    steps[d] = min(t * 2, 1e6)
                    break
                t *= 0.5
            else:
                steps[d] = opts.step
        if best - start_val <= opts.tol * max(1.0, abs(best)):
            break
    return MeasuredTree(tree, tuple(_renormalize(tree, cond))), best


# ---------------------------------------------------------------------------
# measures induced by volatility controls


@dataclass(frozen=True, eq=False)
class QnReport:
    """Per-level arrays of the recursion on the tree built by :func:`qn_from_control`."""

    sigma: tuple
    kappa: tuple
    B: tuple
    M: tuple
    S: tuple
    prob_plus: tuple
    valid: bool
    max_prob_dev: float


@dataclass(frozen=True)
class _StepOut:
    sigma: np.ndarray
    kappa: np.ndarray
    p_plus: np.ndarray
    dB: np.ndarray  # (P, 2): child +1, child -1
    dM: np.ndarray


def _qn_step(control, k, n, Bhist, sig_prev, kap_prev, X_prev, xi_prev, sigma_lo, sigma_hi) -> _StepOut:
    """One step of the recursion for a batch of nodes at depth ``k - 1``."""
    f = control((k - 1) / n, Bhist, 1.0 / n)
    sig = np.clip(f, sigma_lo, sigma_hi)
    kap = 0.5 * (f * f / (sig * sig) - 1.0)
    p_plus = 0.5 * (1.0 + kap_prev * sig_prev * xi_prev / (sig * (1.0 + kap)))
    rn = math.sqrt(n)
    X = np.stack([sig, -sig], axis=1)
    dB = ((1.0 + kap)[:, None] * X - (kap_prev * X_prev)[:, None]) / (rn * np.sqrt(1.0 + 2.0 * kap) * sig)[:, None]
    dM = (X + kap[:, None] * X - (kap_prev * X_prev)[:, None]) / rn
    return _StepOut(sig, kap, p_plus, dB, dM)


def _qn_root(control, n, sigma_lo, sigma_hi):
    f0 = float(control(0.0, np.zeros((1, 1)), 1.0 / n)[0])
    return min(max(f0, sigma_lo), sigma_hi)


def qn_from_control(params: ModelParams, control: VolControl, cap: int = 2_000_000,
                    strict: bool = True) -> tuple[MeasuredTree, QnReport]:
    """Enumerate the non-recombining binary tree of the control-induced measure.

    With ``strict`` an out-of-range transition probability raises
    :class:`InvalidProbability`; otherwise the report is flagged invalid and
    no measure is returned.
    """
    n = params.n
    nodes = 2 ** (n + 1) - 1
    if nodes > cap:
        raise CapExceeded(nodes, cap)
    lo, hi = params.sigma_lo, params.sigma_hi
    sig0 = _qn_root(control, n, lo, hi)
    Bhist = np.zeros((1, 1))
    sig_prev, kap_prev = np.array([sig0]), np.zeros(1)
    X_prev, xi_prev = np.array([sig0]), np.ones(1)
    S_prev = np.array([params.s])
    parents, returns, cond = [np.array([-1])], [np.array([0.0])], [np.ones(1)]
    sig_l, kap_l, B_l, M_l, S_l, pp_l = [sig_prev], [kap_prev], [Bhist[:, 0]], [S_prev.copy()], [S_prev], []
    valid, dev = True, 0.0
    for k in range(1, n + 1):
        st = _qn_step(control, k, n, Bhist, sig_prev, kap_prev, X_prev, xi_prev, lo, hi)
        bad = (st.p_plus < -PROB_TOL) | (st.p_plus > 1 + PROB_TOL)
        if np.any(bad):
            j = int(np.flatnonzero(bad)[0])
            if strict:
                raise InvalidProbability(k, int(2**(k - 1) - 1 + j), float(st.p_plus[j]))
            valid = False
        dev = max(dev, float(np.max(np.abs(st.p_plus - 0.5))))
        m = len(sig_prev)
        par = np.repeat(np.arange(m), 2)
        X = np.stack([st.sigma, -st.sigma], axis=1).ravel()
        B_new = (Bhist[:, -1][:, None] + st.dB).ravel()
        S_new = S_prev[par] + X / math.sqrt(n)
        kap_c = st.kappa[par]
        parents.append(par)
        returns.append(X)
        pp = np.clip(st.p_plus, 0.0, 1.0)
        cond.append(np.stack([pp, 1.0 - pp], axis=1).ravel())
        sig_l.append(st.sigma[par])
        kap_l.append(kap_c)
        B_l.append(B_new)
        S_l.append(S_new)
        M_l.append(S_new + kap_c * X / math.sqrt(n))
        pp_l.append(st.p_plus)
        Bhist = np.concatenate([Bhist[par], B_new[:, None]], axis=1)
        sig_prev, kap_prev, X_prev = st.sigma[par], kap_c, X
        xi_prev = np.tile([1.0, -1.0], m)
        S_prev = S_new
    report = QnReport(tuple(sig_l), tuple(kap_l), tuple(B_l), tuple(M_l), tuple(S_l), tuple(pp_l), valid, dev)
    if not valid:
        return None, report
    tree = ScenarioTree(tuple(parents), tuple(returns))
    return MeasuredTree(tree, tuple(cond)), report


@dataclass(frozen=True, eq=False)
class QnPaths:
    """Monte Carlo sample of the control-induced measure; arrays have shape (P, n+1)."""

    X: np.ndarray
    S: np.ndarray
    B: np.ndarray
    M: np.ndarray
    sigma: np.ndarray
    kappa: np.ndarray
    max_prob_dev: float


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(chunk)])))


def _sample_chunk(params, control, size, rng, record_node_depth=None):
    n = params.n
    lo, hi = params.sigma_lo, params.sigma_hi
    sig0 = _qn_root(control, n, lo, hi)
    X = np.empty((size, n + 1))
    B = np.zeros((size, n + 1))
    sig = np.empty((size, n + 1))
    kap = np.zeros((size, n + 1))
    X[:, 0] = sig0
    sig[:, 0] = sig0
    xi = np.ones(size)
    dev = 0.0
    moments = None
    if record_node_depth is not None:
        moments = np.zeros((size, 4))
    U = rng.random((size, n))
    for k in range(1, n + 1):
        st = _qn_step(control, k, n, B[:, :k], sig[:, k - 1], kap[:, k - 1], X[:, k - 1], xi, lo, hi)
        if np.any((st.p_plus < -PROB_TOL) | (st.p_plus > 1 + PROB_TOL)):
            j = int(np.flatnonzero((st.p_plus < -PROB_TOL) | (st.p_plus > 1 + PROB_TOL))[0])
            raise InvalidProbability(k, j, float(st.p_plus[j]))
        dev = max(dev, float(np.max(np.abs(st.p_plus - 0.5))))
        if moments is not None:
            sel = record_node_depth == k - 1
            if np.any(sel):
                pp = st.p_plus[sel]
                w = np.stack([pp, 1 - pp], axis=1)
                moments[sel, 0] = (w * st.dB[sel]).sum(1)
                moments[sel, 1] = (w * st.dM[sel]).sum(1)
                moments[sel, 2] = (w * st.dB[sel] ** 2).sum(1)
                moments[sel, 3] = pp
        up = U[:, k - 1] < st.p_plus
        xi = np.where(up, 1.0, -1.0)
        X[:, k] = xi * st.sigma
        B[:, k] = B[:, k - 1] + np.where(up, st.dB[:, 0], st.dB[:, 1])
        sig[:, k] = st.sigma
        kap[:, k] = st.kappa
    S = np.empty((size, n + 1))
    S[:, 0] = params.s
    S[:, 1:] = params.s + np.cumsum(X[:, 1:], axis=1) / math.sqrt(n)
    M = S + kap * X / math.sqrt(n)
    return QnPaths(X, S, B, M, sig, kap, dev), moments


def qn_sample(params: ModelParams, control: VolControl, n_paths: int, seed: int, threads: int = 1) -> QnPaths:
    """Sample paths in fixed chunks with one counter-based stream per chunk.

    The output depends only on ``(seed, n_paths)``, not on ``threads``.
    """
    sizes = [min(CHUNK, n_paths - c * CHUNK) for c in range((n_paths + CHUNK - 1) // CHUNK)]

    def job(c):
        return _sample_chunk(params, control, sizes[c], _chunk_rng(seed, c))[0]

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(job, range(len(sizes))))
    else:
        parts = [job(c) for c in range(len(sizes))]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return QnPaths(cat("X"), cat("S"), cat("B"), cat("M"), cat("sigma"), cat("kappa"),
                   max(p.max_prob_dev for p in parts))


@dataclass(frozen=True, eq=False)
class NodeMoments:
    depth: np.ndarray
    mean_dB: np.ndarray
    mean_dM: np.ndarray
    second_dB: np.ndarray
    p_plus: np.ndarray


def qn_node_moments(params: ModelParams, control: VolControl, n_nodes: int, seed: int,
                    min_depth: int = 1) -> NodeMoments:
    """Exact one-step conditional moments at randomly sampled internal nodes.

    Each node is reached by sampling a path and stopping at a uniformly drawn
    depth in ``[min_depth, n - 1]``.
    """
    n = params.n
    if not 0 <= min_depth <= n - 1:
        raise ValidationError("min_depth must lie in [0, n-1]")
    rng = _chunk_rng(seed, 0)
    depth = rng.integers(min_depth, n, size=n_nodes)
    _, mom = _sample_chunk(params, control, n_nodes, rng, record_node_depth=depth)
    return NodeMoments(depth, mom[:, 0], mom[:, 1], mom[:, 2], mom[:, 3])


def qn_conditional_penalty(params: ModelParams, paths: QnPaths) -> np.ndarray:
    """Per path ``sum_i (E[S_n | G_i] - S_i)^2``, using ``E[S_n | F_k] = M_k``.

    Valid when ``M_n = S_n`` on every path (terminal window or constant control).
    """
    if not np.allclose(paths.M[:, -1], paths.S[:, -1], rtol=0, atol=1e-12):
        raise ValidationError("needs M_n = S_n on every path")
    n, N = params.n, params.lookahead
    d = np.minimum(np.arange(n) + N, n)
    diff = paths.M[:, d] - paths.S[:, :n]
    return (diff * diff).sum(axis=1)
