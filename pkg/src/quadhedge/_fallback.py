"""Pure numpy versions of the compiled kernels (same signatures and results)."""
import math

import numpy as np


def hamiltonian_capped(q, lo2, hi2, lam, zcap):
    """sup over z in [0, zcap] of q z / 2 - G(z) / (16 lam), vectorised in q."""
    q = np.asarray(q, dtype=float)
    z = np.where(q >= 0, hi2 * (1 + 4 * lam * q), lo2 * (1 + 4 * lam * q))
    z = np.clip(z, 0.0, zcap)
    lo, hi = math.sqrt(lo2), math.sqrt(hi2)
    G = np.where(z < lo2, (lo - z / lo) ** 2, np.where(z > hi2, (z / hi - hi) ** 2, 0.0))
    return 0.5 * q * z - G / (16 * lam)


def hjb_sweep(v, nt, dt, dx, lo2, hi2, lam, zcap, guard):
    """Run ``nt`` explicit steps of ``v += dt * H(D2 v)`` in place; returns False on blow-up."""
    inv = 1.0 / (dx * dx)
    d2 = np.empty_like(v)
    for _ in range(nt):
        d2[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) * inv
        d2[0] = (v[0] - 2 * v[1] + v[2]) * inv
        d2[-1] = (v[-1] - 2 * v[-2] + v[-3]) * inv
        v += dt * hamiltonian_capped(d2, lo2, hi2, lam, zcap)
        if not (abs(v[0]) < guard and abs(v[-1]) < guard and abs(v[len(v) // 2]) < guard):
            return False
    return bool(np.all(np.isfinite(v)) and np.max(np.abs(v)) < guard)


def block_positions(x, a, phi, psi, active, r, lookahead, lam, adapted):
    """Positions of the block strategy on one path (see ``hedging.insider_block_strategy``)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    rn = math.sqrt(n)
    C = np.concatenate([[0.0], np.cumsum(x)])
    N = lookahead
    gamma = np.zeros(n)
    nb = len(a) - 1
    for k in range(nb):
        if not active[k]:
            continue
        a0, a1 = int(a[k]), int(a[k + 1])
        ramp = phi[k] * np.arange(1, r + 1) / r
        ramp[-1] = phi[k]
        end_mid = a1 if adapted else a1 - r
        comp = np.zeros(n)
        comp[a0 : a0 + r] = ramp[: max(0, min(r, n - a0))]
        i = np.arange(a0 + r, end_mid)
        if i.size:
            fwd = np.minimum(i + N, n)
            lead = np.where(i + N <= n, x[np.minimum(i + N, n) - 1], 0.0)
            steps = (psi[k] * lead + (C[fwd] - C[i]) / (2 * lam)) / rn
            comp[i] = phi[k] + np.cumsum(steps)
        last = comp[end_mid - 1] if end_mid > a0 else 0.0
        j = np.arange(1, r + 1)
        unwind = last * (1 - j / r)
        unwind[-1] = 0.0
        pos = np.arange(end_mid, min(end_mid + r, n))
        comp[pos] = unwind[: len(pos)]
        gamma += comp
    return gamma
