"""numba versions of the kernels in ``_numpy``; same signatures and results."""

from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange


@njit(cache=True)
def _jets(u, q, dx, periodic, h):
    rows, n = u.shape
    out = np.empty((q + 1, rows, n))
    for r in range(rows):
        for j in range(n):
            out[0, r, j] = u[r, j]
            if not periodic and (j < h or j >= n - h):
                for k in range(1, q + 1):
                    out[k, r, j] = np.nan
                continue
            jp1 = (j + 1) % n
            jm1 = (j - 1) % n
            c = u[r, j]
            p1 = u[r, jp1]
            m1 = u[r, jm1]
            if q >= 1:
                out[1, r, j] = (p1 - m1) / (2.0 * dx)
            if q >= 2:
                out[2, r, j] = (p1 - 2.0 * c + m1) / (dx * dx)
            if q >= 3:
                p2 = u[r, (j + 2) % n]
                m2 = u[r, (j - 2) % n]
                out[3, r, j] = (p2 - 2.0 * p1 + 2.0 * m1 - m2) / (2.0 * dx * dx * dx)
                if q >= 4:
                    out[4, r, j] = (p2 - 4.0 * p1 + 6.0 * c - 4.0 * m1 + m2) / (dx * dx * dx * dx)
    return out


def central_jets(u, q, dx, periodic):
    u = np.ascontiguousarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError("central_jets expects a 2-d array")
    h = 1 if q <= 2 else 2
    if periodic:
        return _jets(u, q, float(dx), True, h)
    return _jets(u, q, float(dx), False, h)


@njit(cache=True)
def _monomials(vars_, exps):
    nm, nv = exps.shape
    n = vars_.shape[1]
    out = np.ones((nm, n))
    for m in range(nm):
        for v in range(nv):
            e = exps[m, v]
            if e == 0:
                continue
            for j in range(n):
                x = vars_[v, j]
                p = x
                for _ in range(e - 1):
                    p *= x
                out[m, j] *= p
    return out


BLOCK = 4096


@njit(cache=True, parallel=True)
def _monomials_parallel(vars_, exps):
    nm = exps.shape[0]
    n = vars_.shape[1]
    nb = (n + BLOCK - 1) // BLOCK
    out = np.empty((nm, n))
    for b in prange(nb):
        lo = b * BLOCK
        hi = min(n, lo + BLOCK)
        out[:, lo:hi] = _monomials(vars_[:, lo:hi], exps)
    return out


def monomials(vars_, exps):
    vars_ = np.ascontiguousarray(vars_, dtype=np.float64)
    exps = np.ascontiguousarray(exps, dtype=np.int64)
    # thread start-up only pays off on long rows
    if numba.get_num_threads() > 1 and vars_.shape[1] >= 4 * BLOCK:
        return _monomials_parallel(vars_, exps)
    return _monomials(vars_, exps)


@njit(cache=True)
def _poly_eval(vars_, exps, W, lo, hi):
    nm, nv = exps.shape
    nr = W.shape[0]
    out = np.zeros((nr, hi - lo))
    acc = np.empty(hi - lo)
    for m in range(nm):
        acc[:] = 1.0
        for v in range(nv):
            e = exps[m, v]
            for _ in range(e):
                for j in range(hi - lo):
                    acc[j] *= vars_[v, lo + j]
        for r in range(nr):
            w = W[r, m]
            if w != 0.0:
                for j in range(hi - lo):
                    out[r, j] += w * acc[j]
    return out


@njit(cache=True, parallel=True)
def _poly_eval_parallel(vars_, exps, W):
    n = vars_.shape[1]
    out = np.empty((W.shape[0], n))
    nb = (n + BLOCK - 1) // BLOCK
    for b in prange(nb):
        lo = b * BLOCK
        hi = min(n, lo + BLOCK)
        out[:, lo:hi] = _poly_eval(vars_, exps, W, lo, hi)
    return out


def poly_eval(vars_, exps, W):
    vars_ = np.ascontiguousarray(vars_, dtype=np.float64)
    exps = np.ascontiguousarray(exps, dtype=np.int64)
    W = np.ascontiguousarray(W, dtype=np.float64)
    if numba.get_num_threads() > 1 and vars_.shape[1] >= 4 * BLOCK:
        return _poly_eval_parallel(vars_, exps, W)
    return _poly_eval(vars_, exps, W, 0, vars_.shape[1])
