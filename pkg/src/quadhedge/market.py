"""Scenario trees, price paths, payoffs and space-time stopping times.

The discrete market has ``n`` periods on ``[0, 1]``.  A scenario is a
sequence of returns ``x_1..x_n`` with ``sigma_lo <= |x_i| <= sigma_hi`` and
the price is the Bachelier-type walk ``S_k = s + sum(x_1..x_k) / sqrt(n)``.
Finite trees restrict every magnitude to the grid

    (j / k) * sigma_lo + (1 - j / k) * sigma_hi,    j = 0..k

so each node has ``2 * #magnitudes`` children.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CapExceeded, InvalidParams, OutOfOmega, ShapeMismatch, ValidationError

DEFAULT_NODE_CAP = 20_000_000
_BAND_TOL = 1e-12


@dataclass(frozen=True)
class ModelParams:
    """Market quintuple plus insider lookahead and magnitude-grid resolution."""

    n: int
    s: float = 0.0
    sigma_lo: float = 1.0
    sigma_hi: float = 1.0
    lambda_cost: float = 0.5
    lookahead: int = 0
    grid_k: int = 1

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise InvalidParams(f"n must be a positive integer, got {self.n}")
        if not (0 < self.sigma_lo <= self.sigma_hi) or not math.isfinite(self.sigma_hi):
            raise InvalidParams(f"need 0 < sigma_lo <= sigma_hi, got {self.sigma_lo}, {self.sigma_hi}")
        if not self.lambda_cost > 0:
            raise InvalidParams(f"lambda_cost must be positive, got {self.lambda_cost}")
        if int(self.lookahead) != self.lookahead or not 0 <= self.lookahead <= self.n:
            raise InvalidParams(f"lookahead must be an integer in [0, n], got {self.lookahead}")
        if int(self.grid_k) != self.grid_k or self.grid_k < 1:
            raise InvalidParams(f"grid_k must be a positive integer, got {self.grid_k}")

    @property
    def magnitudes(self) -> tuple[float, ...]:
        """Distinct return magnitudes of the grid, largest first."""
        k = self.grid_k
        out: list[float] = []
        for j in range(k + 1):
            m = (j / k) * self.sigma_lo + (1 - j / k) * self.sigma_hi
            if not any(abs(m - v) <= 1e-14 * max(1.0, abs(v)) for v in out):
                out.append(m)
        return tuple(out)

    @property
    def branching(self) -> int:
        return 2 * len(self.magnitudes)

    def with_(self, **changes) -> "ModelParams":
        fields = {**self.__dict__, **changes}
        return ModelParams(**fields)


def info_depth(i: int, lookahead: int, n: int) -> int:
    """Depth of the tree level that the insider has observed when trading at time i."""
    return min(i + lookahead, n)


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """A finite path tree stored level by level.

    ``parents[d][j]`` is the index (within level ``d - 1``) of node ``j`` of
    level ``d`` and ``returns[d][j]`` is the return on the edge into it.
    Nodes of a level are sorted by parent so children are contiguous; the
    global (breadth-first) id of node ``j`` at depth ``d`` is
    ``offsets[d] + j``.  Level 0 holds the root only.
    """

    parents: tuple
    returns: tuple
    magnitudes: Optional[tuple] = None

    def __post_init__(self):
        if len(self.parents) != len(self.returns) or len(self.parents) < 2:
            raise ShapeMismatch("parents/returns must describe levels 0..n with n >= 1")
        if len(self.parents[0]) != 1:
            raise ShapeMismatch("level 0 must contain exactly the root")
        for d in range(1, len(self.parents)):
            p = self.parents[d]
            if len(p) != len(self.returns[d]):
                raise ShapeMismatch(f"level {d}: parents and returns differ in length")
            if len(p) and (np.any(np.diff(p) < 0) or p[0] < 0 or p[-1] >= len(self.parents[d - 1])):
                raise ShapeMismatch(f"level {d}: parent indices must be sorted and in range")

    @property
    def depth(self) -> int:
        return len(self.parents) - 1

    @cached_property
    def level_sizes(self) -> np.ndarray:
        return np.array([len(p) for p in self.parents], dtype=np.int64)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.level_sizes)[:-1]]).astype(np.int64)

    @property
    def n_nodes(self) -> int:
        return int(self.level_sizes.sum())

    @property
    def n_leaves(self) -> int:
        return int(self.level_sizes[-1])

    @cached_property
    def child_start(self) -> tuple:
        """``child_start[d][v]:child_start[d][v+1]`` are the children of node v at depth d."""
        out = []
        for d in range(self.depth):
            counts = np.bincount(self.parents[d + 1], minlength=self.level_sizes[d])
            out.append(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))
        return tuple(out)

    @cached_property
    def leaf_ancestors(self) -> np.ndarray:
        """Array (L, n+1): local index of each leaf's ancestor at every depth."""
        n = self.depth
        anc = np.empty((self.n_leaves, n + 1), dtype=np.int64)
        anc[:, n] = np.arange(self.n_leaves)
        for d in range(n, 0, -1):
            anc[:, d - 1] = self.parents[d][anc[:, d]]
        return anc

    @cached_property
    def leaf_returns(self) -> np.ndarray:
        """Array (L, n) of returns along every root-to-leaf path."""
        anc = self.leaf_ancestors
        return np.stack([self.returns[d][anc[:, d]] for d in range(1, self.depth + 1)], axis=1)

    def leaf_prices(self, s: float) -> np.ndarray:
        """Array (L, n+1) of price paths (scaling by 1/sqrt(depth))."""
        x = self.leaf_returns
        L, n = x.shape
        out = np.empty((L, n + 1))
        out[:, 0] = s
        out[:, 1:] = s + np.cumsum(x, axis=1) / math.sqrt(n)
        return out

    def node_id(self, depth: int, local: int) -> int:
        return int(self.offsets[depth] + local)

    def edges(self):
        """Iterate ``(node_id, parent_id, return)`` in breadth-first order (root has parent -1)."""
        yield 0, -1, 0.0
        for d in range(1, self.depth + 1):
            base, pbase = self.offsets[d], self.offsets[d - 1]
            for j, (p, x) in enumerate(zip(self.parents[d], self.returns[d])):
                yield int(base + j), int(pbase + p), float(x)

    def locate(self, returns: Sequence[float]) -> np.ndarray:
        """Local node index at every depth 0..n along the path with the given returns."""
        x = np.asarray(returns, dtype=float)
        if x.shape != (self.depth,):
            raise ShapeMismatch(f"expected {self.depth} returns, got shape {x.shape}")
        path = np.zeros(self.depth + 1, dtype=np.int64)
        v = 0
        for d in range(self.depth):
            lo, hi = self.child_start[d][v], self.child_start[d][v + 1]
            cand = self.returns[d + 1][lo:hi]
            hit = np.flatnonzero(np.isclose(cand, x[d], rtol=1e-12, atol=1e-12))
            if hit.size == 0:
                raise OutOfOmega(f"return {x[d]} at step {d + 1} is not a branch of the tree")
            v = int(lo + hit[0])
            path[d + 1] = v
        return path


def build_tree(params: ModelParams, cap: int = DEFAULT_NODE_CAP) -> ScenarioTree:
    """Enumerate the full multinomial tree over the magnitude grid of ``params``."""
    mags = params.magnitudes
    b = 2 * len(mags)
    n = params.n
    nodes = sum(b**d for d in range(n + 1))
    if nodes > cap:
        raise CapExceeded(nodes, cap)
    child_vals = np.array([v for m in mags for v in (m, -m)])
    parents = [np.array([-1], dtype=np.int64)]
    returns = [np.array([0.0])]
    for d in range(1, n + 1):
        size = b**d
        parents.append(np.arange(size, dtype=np.int64) // b)
        returns.append(np.tile(child_vals, b ** (d - 1)))
    return ScenarioTree(tuple(parents), tuple(returns), magnitudes=mags)


@dataclass(frozen=True, eq=False)
class PathView:
    returns: np.ndarray
    prices: np.ndarray

    @property
    def n(self) -> int:
        return len(self.returns)


def check_in_omega(params: ModelParams, returns) -> np.ndarray:
    x = np.asarray(returns, dtype=float)
    a = np.abs(x)
    tol = _BAND_TOL * max(1.0, params.sigma_hi)
    bad = (a < params.sigma_lo - tol) | (a > params.sigma_hi + tol) | ~np.isfinite(x)
    if np.any(bad):
        i = int(np.flatnonzero(bad.ravel())[0])
        raise OutOfOmega(f"return {x.ravel()[i]} violates [{params.sigma_lo}, {params.sigma_hi}]")
    return x


def stock_prices(params: ModelParams, returns: Sequence[float]) -> PathView:
    x = check_in_omega(params, returns)
    if x.shape != (params.n,):
        raise ShapeMismatch(f"expected {params.n} returns, got shape {x.shape}")
    prices = np.empty(params.n + 1)
    prices[0] = params.s
    prices[1:] = params.s + np.cumsum(x) / math.sqrt(params.n)
    return PathView(returns=x, prices=prices)


# ---------------------------------------------------------------------------
# payoffs


@dataclass(frozen=True)
class Payoff:
    """A path functional evaluated on the right-continuous step embedding of a price path.

    Only ``kind`` decides the functional; the constructor class methods set the
    declared Lipschitz constant and the nonnegativity flag.  ``custom`` wraps a
    vectorised callable mapping an ``(..., n+1)`` price array to ``(...)``.
    """

    kind: str
    strike: float = 0.0
    value: float = 0.0
    alpha: float = 0.0
    base: Optional["Payoff"] = None
    terms: tuple = ()
    func: Optional[Callable] = field(default=None, compare=False)
    lipschitz: float = 0.0
    nonnegative: bool = True
    markovian: bool = True
    label: str = ""

    @classmethod
    def call(cls, strike: float) -> "Payoff":
        return cls("call", strike=float(strike), lipschitz=1.0, label=f"call(K={strike:g})")

    @classmethod
    def lookback_max(cls) -> "Payoff":
        return cls("lookback_max", lipschitz=1.0, markovian=False, label="lookback_max")

    @classmethod
    def constant(cls, c: float) -> "Payoff":
        return cls("constant", value=float(c), lipschitz=0.0, nonnegative=c >= 0, label=f"constant({c:g})")

    @classmethod
    def terminal_quadratic(cls, base: "Payoff", alpha: float) -> "Payoff":
        if alpha < 0:
            raise ValidationError("alpha must be nonnegative")
        # Not Lipschitz: the quadratic term grows faster than linearly.
        return cls(
            "terminal_quadratic",
            base=base,
            alpha=float(alpha),
            lipschitz=math.inf,
            nonnegative=False,
            markovian=base.markovian,
            label=f"{base.label}-{alpha:g}*(p1-p0)^2",
        )

    @classmethod
    def combination(cls, weighted: Sequence[tuple[float, "Payoff"]]) -> "Payoff":
        terms = tuple((float(w), p) for w, p in weighted)
        lip = sum(abs(w) * p.lipschitz for w, p in terms)
        nonneg = all((w >= 0 and p.nonnegative) for w, p in terms)
        return cls(
            "combination",
            terms=terms,
            lipschitz=lip,
            nonnegative=nonneg,
            markovian=all(p.markovian for _, p in terms),
            label="+".join(f"{w:g}*{p.label}" for w, p in terms),
        )

    @classmethod
    def custom(cls, func: Callable, lipschitz: float, nonnegative: bool, markovian: bool = False, label="custom"):
        return cls("custom", func=func, lipschitz=float(lipschitz), nonnegative=nonnegative,
                   markovian=markovian, label=label)

    def shift(self, c: float) -> "Payoff":
        return Payoff.combination([(1.0, self), (1.0, Payoff.constant(c))])

    def evaluate(self, prices) -> np.ndarray:
        """Evaluate on price paths ``(..., n+1)``; index 0 is ``t = 0``, index n is ``t = 1``."""
        p = np.asarray(prices, dtype=float)
        if self.kind == "call":
            return np.maximum(p[..., -1] - self.strike, 0.0)
        if self.kind == "lookback_max":
            return p.max(axis=-1)
        if self.kind == "constant":
            return np.full(p.shape[:-1], self.value)
        if self.kind == "terminal_quadratic":
            return self.base.evaluate(p) - self.alpha * (p[..., -1] - p[..., 0]) ** 2
        if self.kind == "combination":
            out = np.zeros(p.shape[:-1])
            for w, term in self.terms:
                out = out + w * term.evaluate(p)
            return out
        if self.kind == "custom":
            return np.asarray(self.func(p), dtype=float)
        raise ValidationError(f"unknown payoff kind {self.kind!r}")

    def terminal_function(self, s: float) -> Callable[[np.ndarray], np.ndarray]:
        """``h`` with ``H(p) = h(p_1)`` for Markovian payoffs started at ``s``."""
        if not self.markovian:
            raise ValidationError(f"payoff {self.label} is path dependent")

        def h(x):
            x = np.asarray(x, dtype=float)
            paths = np.stack([np.full_like(x, s), x], axis=-1)
            return self.evaluate(paths)

        return h


def eval_payoff(payoff: Payoff, path: PathView) -> float:
    return float(payoff.evaluate(path.prices))


# ---------------------------------------------------------------------------
# space-time discretisation


@dataclass(frozen=True)
class DiscretizationParams:
    eps: float
    lam: float
    c_lambda: float

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise InvalidParams(f"eps must lie in (0, 1), got {self.eps}")
        if not 0 < self.lam < 1:
            raise InvalidParams(f"lam must lie in (0, 1), got {self.lam}")
        if not self.c_lambda > 2:
            raise InvalidParams(f"c_lambda must exceed 2, got {self.c_lambda}")

    @property
    def K(self) -> int:
        return int(math.floor(self.c_lambda / (self.eps * self.lam) ** 2)) + 1

    @classmethod
    def from_payoff(cls, payoff: Payoff, s: float, eps: float, lam: float) -> "DiscretizationParams":
        """Growth constant from the declared Lipschitz constant.

        ``H(p) <= H(s) + L*|p - s| <= H(s) + L^2/(4 lam^2) + lam^2 |p - s|^2``.
        """
        if not math.isfinite(payoff.lipschitz):
            raise ValidationError("growth constant needs a finite Lipschitz constant")
        h0 = float(payoff.evaluate(np.array([s, s])))
        c = h0 + payoff.lipschitz**2 / (4 * lam**2)
        if c <= 2:
            c = float(np.nextafter(2.0, np.inf))
        return cls(eps=eps, lam=lam, c_lambda=c)


@dataclass(frozen=True, eq=False)
class SampledPath:
    """Stopping times on the grid {k/n}, their grid indices and the sampled step path."""

    taus: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    terminal: float

    def __call__(self, t: float) -> float:
        if t >= 1.0:
            return self.terminal
        k = int(np.searchsorted(self.taus, t, side="right")) - 1
        return float(self.values[k])


def stopping_time_indices(prices: np.ndarray, eps: float, max_count: Optional[int] = None) -> np.ndarray:
    """Grid indices ``[n tau_0], [n tau_1], ...`` ending at n (first index where tau = 1)."""
    n = len(prices) - 1
    time_steps = n * eps * eps
    out = [0]
    j = 0
    while j < n and (max_count is None or len(out) <= max_count):
        moved = np.abs(prices[j + 1 :] - prices[j]) >= eps
        # time trigger: first grid point with (j' - j)/n >= eps^2
        t_hit = math.ceil(time_steps - 1e-9)
        t_hit = max(t_hit, 1)
        first = np.flatnonzero(moved)
        s_hit = int(first[0]) + 1 if first.size else n + 1
        j = min(j + min(s_hit, t_hit), n)
        out.append(j)
    return np.array(out, dtype=np.int64)


def stopping_times(path: PathView, eps: float) -> SampledPath:
    if not eps > 0:
        raise InvalidParams(f"eps must be positive, got {eps}")
    idx = stopping_time_indices(path.prices, eps)
    n = path.n
    return SampledPath(
        taus=idx / n,
        indices=idx,
        values=path.prices[idx],
        terminal=float(path.prices[-1]),
    )
