# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: explicit HJB time stepping and the block strategy positions."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, isfinite

cnp.import_array()


cdef inline double _ham(double q, double lo, double hi, double lo2, double hi2,
                        double lam, double zcap) nogil:
    cdef double z, G
    if q >= 0:
        z = hi2 * (1.0 + 4.0 * lam * q)
    else:
        z = lo2 * (1.0 + 4.0 * lam * q)
    if z < 0.0:
        z = 0.0
    elif z > zcap:
        z = zcap
    if z < lo2:
        G = (lo - z / lo) * (lo - z / lo)
    elif z > hi2:
        G = (z / hi - hi) * (z / hi - hi)
    else:
        G = 0.0
    return 0.5 * q * z - G / (16.0 * lam)


def hamiltonian_capped(q, double lo2, double hi2, double lam, double zcap):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] qa = np.ascontiguousarray(np.atleast_1d(q), dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(qa)
    cdef double lo = sqrt(lo2), hi = sqrt(hi2)
    cdef Py_ssize_t i
    for i in range(qa.shape[0]):
        out[i] = _ham(qa[i], lo, hi, lo2, hi2, lam, zcap)
    return out.reshape(np.shape(q))


def hjb_sweep(double[::1] v, long nt, double dt, double dx, double lo2, double hi2,
              double lam, double zcap, double guard):
    cdef Py_ssize_t nx = v.shape[0], i
    cdef long t
    cdef double inv = 1.0 / (dx * dx)
    cdef double lo = sqrt(lo2), hi = sqrt(hi2)
    cdef double[::1] d2 = np.empty(nx)
    cdef bint ok = True
    with nogil:
        for t in range(nt):
            for i in range(1, nx - 1):
                d2[i] = (v[i + 1] - 2.0 * v[i] + v[i - 1]) * inv
            d2[0] = (v[0] - 2.0 * v[1] + v[2]) * inv
            d2[nx - 1] = (v[nx - 1] - 2.0 * v[nx - 2] + v[nx - 3]) * inv
            for i in range(nx):
                v[i] = v[i] + dt * _ham(d2[i], lo, hi, lo2, hi2, lam, zcap)
            if not (fabs(v[0]) < guard and fabs(v[nx - 1]) < guard and fabs(v[nx // 2]) < guard):
                ok = False
                break
        if ok:
            for i in range(nx):
                if not (isfinite(v[i]) and fabs(v[i]) < guard):
                    ok = False
                    break
    return bool(ok)


def block_positions(x, a, phi, psi, active, long r, long lookahead, double lam, bint adapted):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef long[::1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef double[::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef double[::1] ps = np.ascontiguousarray(psi, dtype=np.float64)
    cdef signed char[::1] act = np.ascontiguousarray(active, dtype=np.int8)
    cdef Py_ssize_t n = xv.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(n)
    cdef double[::1] gamma = out
    cdef double[::1] C = np.zeros(n + 1)
    cdef double rn = sqrt(<double>n)
    cdef Py_ssize_t i, k, j, a0, a1, end_mid, fwd
    cdef double cur, lead, last
    for i in range(n):
        C[i + 1] = C[i] + xv[i]
    for k in range(av.shape[0] - 1):
        if not act[k]:
            continue
        a0 = av[k]
        a1 = av[k + 1]
        end_mid = a1 if adapted else a1 - r
        cur = 0.0
        for j in range(r):
            if a0 + j >= n:
                break
            cur = ph[k] if j == r - 1 else ph[k] * (j + 1) / r
            gamma[a0 + j] += cur
        for i in range(a0 + r, end_mid):
            fwd = i + lookahead
            if fwd <= n:
                lead = xv[fwd - 1]
            else:
                lead = 0.0
                fwd = n
            cur = cur + (ps[k] * lead + (C[fwd] - C[i]) / (2.0 * lam)) / rn
            gamma[i] += cur
        last = cur if end_mid > a0 else 0.0
        for j in range(r):
            i = end_mid + j
            if i >= n:
                break
            gamma[i] += 0.0 if j == r - 1 else last * (1.0 - (j + 1.0) / r)
    return out
