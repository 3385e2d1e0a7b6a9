"""Insider-adapted strategies, mark-to-market wealth and the block strategy.

A position held after time ``i`` may depend on the first ``i + N`` returns,
so on a finite tree there is one decision slot per node at depth
``min(i + N, n)``.  Wealth follows

    Y_k = sum_{i<k} gamma_i (S_{i+1} - S_i) - Lambda (gamma_i - gamma_{i-1})^2,  gamma_{-1} = 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from . import kernels
from .errors import BlockTooShort, ShapeMismatch, ValidationError
from .market import (
    DiscretizationParams,
    ModelParams,
    ScenarioTree,
    check_in_omega,
    info_depth,
    stock_prices,
    stopping_time_indices,
)


@dataclass(frozen=True, eq=False)
class InfoIndex:
    """Decision slots: time ``i`` owns the nodes of tree level ``depths[i]``."""

    tree: ScenarioTree
    lookahead: int

    def __post_init__(self):
        if not 0 <= self.lookahead <= self.tree.depth:
            raise ValidationError("lookahead must lie in [0, n]")

    @property
    def n(self) -> int:
        return self.tree.depth

    @cached_property
    def depths(self) -> np.ndarray:
        return np.array([info_depth(i, self.lookahead, self.n) for i in range(self.n)], dtype=np.int64)

    @cached_property
    def offsets(self) -> np.ndarray:
        sizes = self.tree.level_sizes[self.depths]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def n_slots(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def leaf_slots(self) -> np.ndarray:
        """(L, n) flat slot index used by every leaf at every time."""
        anc = self.tree.leaf_ancestors
        return self.offsets[:-1][None, :] + anc[:, self.depths]

    def path_slots(self, local_path: np.ndarray) -> np.ndarray:
        return self.offsets[:-1] + np.asarray(local_path)[self.depths]


@dataclass(frozen=True, eq=False)
class Strategy:
    """One position per (time, information slot), stored flat in slot order."""

    index: InfoIndex
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.index.n_slots,):
            raise ShapeMismatch(f"strategy needs {self.index.n_slots} positions, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("positions must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, index: InfoIndex) -> "Strategy":
        return cls(index, np.zeros(index.n_slots))

    def positions(self, i: int) -> np.ndarray:
        o = self.index.offsets
        return self.values[o[i] : o[i + 1]]

    def along(self, returns: Sequence[float]) -> np.ndarray:
        local = self.index.tree.locate(returns)
        return self.values[self.index.path_slots(local)]

    def leaf_positions(self) -> np.ndarray:
        return self.values[self.index.leaf_slots]


@dataclass(frozen=True, eq=False)
class PathStrategy:
    """Positions ``gamma_0..gamma_{n-1}`` built for one specific return path."""

    positions: np.ndarray
    returns: np.ndarray
    blocks: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class WealthLedger:
    wealth: np.ndarray
    costs: np.ndarray
    total_cost: float
    final_position: float

    @property
    def terminal(self) -> float:
        return float(self.wealth[-1])


def wealth_from_positions(gamma: np.ndarray, dS: np.ndarray, lambda_cost: float) -> WealthLedger:
    gamma = np.asarray(gamma, dtype=float)
    trades = np.diff(gamma, prepend=0.0)
    costs = lambda_cost * trades**2
    Y = np.concatenate([[0.0], np.cumsum(gamma * dS - costs)])
    return WealthLedger(wealth=Y, costs=costs, total_cost=float(costs.sum()), final_position=float(gamma[-1]))


def wealth(params: ModelParams, strategy, returns: Sequence[float]) -> WealthLedger:
    """Mark-to-market wealth along one path.

    ``strategy`` may be a tree :class:`Strategy`, a :class:`PathStrategy` or
    a plain sequence of ``n`` positions.
    """
    path = stock_prices(params, returns)
    if isinstance(strategy, Strategy):
        if strategy.index.n != params.n:
            raise ShapeMismatch("strategy horizon differs from params.n")
        gamma = strategy.along(path.returns)
    elif isinstance(strategy, PathStrategy):
        if not np.allclose(strategy.returns, path.returns, rtol=0, atol=1e-14):
            raise ShapeMismatch("path strategy was built for a different path")
        gamma = strategy.positions
    else:
        gamma = np.asarray(strategy, dtype=float)
    if gamma.shape != (params.n,):
        raise ShapeMismatch(f"expected {params.n} positions, got shape {gamma.shape}")
    return wealth_from_positions(gamma, np.diff(path.prices), params.lambda_cost)


def leaf_terminal_wealth(params: ModelParams, strategy: Strategy) -> np.ndarray:
    """Terminal wealth ``Y_n`` on every leaf of the strategy's tree."""
    tree = strategy.index.tree
    G = strategy.leaf_positions()
    dS = tree.leaf_returns / math.sqrt(params.n)
    D = np.diff(G, axis=1, prepend=0.0)
    return (G * dS).sum(axis=1) - params.lambda_cost * (D * D).sum(axis=1)


# ---------------------------------------------------------------------------
# block strategy with constant-speed ramps


def icbrt(n: int) -> int:
    """Integer part of the cube root of n."""
    r = int(round(n ** (1.0 / 3.0)))
    while r**3 > n:
        r -= 1
    while (r + 1) ** 3 <= n:
        r += 1
    return r


def block_boundaries(params: ModelParams, disc: DiscretizationParams, returns) -> np.ndarray:
    """Indices ``a_0 = 0 < a_1 < ... <= n`` of at most ``K`` blocks."""
    path = stock_prices(params, returns)
    a = stopping_time_indices(path.prices, disc.eps, max_count=disc.K)
    return a[: disc.K + 1]


def _block_inputs(params, disc, phi, psi, returns):
    x = check_in_omega(params, returns)
    a = block_boundaries(params, disc, x)
    blocks = len(a) - 1
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if len(phi) < blocks or len(psi) < blocks:
        raise ShapeMismatch(f"need phi/psi for {blocks} blocks, got {len(phi)}/{len(psi)}")
    bound = max(math.log(params.n), 0.0)
    if np.any(np.abs(phi[:blocks]) > bound + 1e-12) or np.any(np.abs(psi[:blocks]) > bound + 1e-12):
        raise ValidationError(f"|phi|, |psi| must not exceed log n = {bound:.4g}")
    return x, a, phi[:blocks], psi[:blocks]


def insider_block_strategy(
    params: ModelParams,
    disc: DiscretizationParams,
    phi: Sequence[float],
    psi: Sequence[float],
    returns: Sequence[float],
    schedule: str = "anticipative",
) -> PathStrategy:
    """Block strategy: ramp to ``phi_k``, trade the insider rule, then liquidate.

    On block ``[a_k, a_{k+1})`` with ``r = [n^(1/3)]``, ``b_k = a_k + r`` and
    ``c_k = a_{k+1} - r`` the position ramps linearly from 0 to ``phi_k`` on
    ``[a_k, b_k)``, follows

        gamma_i - gamma_{i-1} = (psi_k X_{i+N} + sum_{j=i+1}^{i+N} X_j / (2 Lambda)) / sqrt(n)

    on ``[b_k, c_k)`` and is unwound linearly to 0 on ``[c_k, a_{k+1})``.
    Blocks starting after ``n - 2 n^(1/3)`` are left flat.

    ``schedule="anticipative"`` starts the unwind ``r`` steps before the block end,
    which needs to know ``a_{k+1}`` in advance.  ``schedule="adapted"`` runs
    the insider rule up to ``a_{k+1}`` and unwinds over the following ``r``
    steps on top of the next block, so it only uses ``X_1..X_{i+N}``.
    """
    if schedule not in ("anticipative", "adapted"):
        raise ValidationError(f"unknown schedule {schedule!r}")
    x, a, phi, psi = _block_inputs(params, disc, phi, psi, returns)
    n = params.n
    r = icbrt(n)
    active = a[:-1] <= n - 2 * n ** (1.0 / 3.0)
    if schedule == "anticipative":
        for k in np.flatnonzero(active):
            b, c = a[k] + r, a[k + 1] - r
            if b >= c:
                raise BlockTooShort(int(k), int(a[k]), int(b), int(c))
    else:
        for k in np.flatnonzero(active):
            if a[k] + r >= a[k + 1]:
                raise BlockTooShort(int(k), int(a[k]), int(a[k] + r), int(a[k + 1]))
    gamma = kernels.block_positions(
        x, a, phi, psi, active.astype(np.int8), r, params.lookahead, params.lambda_cost, schedule == "adapted"
    )
    return PathStrategy(positions=gamma, returns=x, blocks=a)


def lemma43_rhs(
    params: ModelParams,
    disc: DiscretizationParams,
    phi: Sequence[float],
    psi: Sequence[float],
    returns: Sequence[float],
) -> float:
    """Guaranteed wealth of the block strategy up to the vanishing error term.

    ``sum_k phi_k dS_k + (psi_k/2 + N/(4 Lambda)) dS_k^2 - (psi_k/2 + Lambda psi_k^2) dQ_k``
    with ``dS_k``, ``dQ_k`` the price and quadratic-variation increments over block k.
    """
    x, a, phi, psi = _block_inputs(params, disc, phi, psi, returns)
    n = params.n
    S = np.concatenate([[params.s], params.s + np.cumsum(x) / math.sqrt(n)])
    Q = np.concatenate([[0.0], np.cumsum(x * x) / n])
    dS = S[a[1:]] - S[a[:-1]]
    dQ = Q[a[1:]] - Q[a[:-1]]
    N, lam = params.lookahead, params.lambda_cost
    return float(np.sum(phi * dS + (psi / 2 + N / (4 * lam)) * dS**2 - (psi / 2 + lam * psi**2) * dQ))


def block_shortfall(params, disc, phi, psi, returns, schedule: str = "anticipative") -> float:
    """``lemma43_rhs - Y_n`` for the block strategy on one path."""
    strat = insider_block_strategy(params, disc, phi, psi, returns, schedule=schedule)
    Y = wealth(params, strat, returns).terminal
    return lemma43_rhs(params, disc, phi, psi, returns) - Y
