"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from quadhedge import _fallback

try:
    from quadhedge import _ckernels
except ImportError:
    _ckernels = None


def hjb_case(nx=401, nt=2000):
    x = np.linspace(-8, 8, nx)
    v0 = np.maximum(x, 0.0) - 0.25 * x * x
    zcap = 2.25 * (1 + 4 * 0.5 * 50)
    dx = x[1] - x[0]
    dt = 0.9 * dx * dx / zcap

    def run(mod):
        v = v0.copy()
        mod.hjb_sweep(v, nt, dt, dx, 1.0, 2.25, 0.5, zcap, 1e6)

    return run


def block_case(n=16384):
    rng = np.random.default_rng(0)
    x = rng.choice([-1.0, 1.0], n)
    a = np.unique(np.concatenate([[0], np.sort(rng.choice(np.arange(100, n - 100), 60, replace=False)), [n]]))
    a = a[np.concatenate([[True], np.diff(a) > 60])]
    a[-1] = n
    k = len(a) - 1
    phi, psi = rng.uniform(-2, 2, k), rng.uniform(-2, 2, k)
    active = np.ones(k, dtype=np.int8)

    def run(mod):
        mod.block_positions(x, a, phi, psi, active, 25, 2, 0.5, True)

    return run


def hamiltonian_case(m=200_000):
    q = np.linspace(-5, 5, m)

    def run(mod):
        mod.hamiltonian_capped(q, 1.0, 2.25, 0.5, 200.0)

    return run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    cases = {"hjb_sweep": hjb_case(), "block_positions": block_case(), "hamiltonian_capped": hamiltonian_case()}
    print(f"{'kernel':<20}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}")
    for name, run in cases.items():
        py = min(timeit.repeat(lambda: run(_fallback), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<20}{py:>14.2f}{'n/a':>14}{'':>10}")
            continue
        cy = min(timeit.repeat(lambda: run(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{py:>14.2f}{cy:>14.2f}{py / cy:>9.1f}x")


if __name__ == "__main__":
    main()
