"""Reference implementations of the hot loops in plain numpy."""

from __future__ import annotations

import numpy as np


def halfwidth(q: int) -> int:
    return 1 if q <= 2 else 2


def _shift(u, s, periodic):
    if periodic:
        return np.roll(u, -s, axis=-1)
    out = np.full_like(u, np.nan)
    n = u.shape[-1]
    if s >= 0:
        out[..., : n - s] = u[..., s:]
    else:
        out[..., -s:] = u[..., : n + s]
    return out


def central_jets(u: np.ndarray, q: int, dx: float, periodic: bool) -> np.ndarray:
    """Second-order centred x-derivatives of orders ``0..q`` for every row of ``u``.

    ``u`` has shape (rows, N); the result has shape (q+1, rows, N). Without
    periodic wrap the stencil margin is filled with NaN.
    """
    u = np.asarray(u, dtype=float)
    out = np.empty((q + 1,) + u.shape)
    out[0] = u
    p1, m1 = _shift(u, 1, periodic), _shift(u, -1, periodic)
    if q >= 1:
        out[1] = (p1 - m1) / (2 * dx)
    if q >= 2:
        out[2] = (p1 - 2 * u + m1) / dx ** 2
    if q >= 3:
        p2, m2 = _shift(u, 2, periodic), _shift(u, -2, periodic)
        out[3] = (p2 - 2 * p1 + 2 * m1 - m2) / (2 * dx ** 3)
        if q >= 4:
            out[4] = (p2 - 4 * p1 + 6 * u - 4 * m1 + m2) / dx ** 4
    if not periodic:
        h = halfwidth(q)
        out[1:, :, :h] = np.nan
        out[1:, :, -h:] = np.nan
    return out


def monomials(vars_: np.ndarray, exps: np.ndarray) -> np.ndarray:
    """Values of ``prod_v vars[v]**exps[m, v]`` with shape (n_monomials, N)."""
    vars_ = np.asarray(vars_, dtype=float)
    out = np.ones((exps.shape[0], vars_.shape[1]))
    for m in range(exps.shape[0]):
        for v in np.nonzero(exps[m])[0]:
            out[m] *= vars_[v] ** int(exps[m, v])
    return out


def poly_eval(vars_: np.ndarray, exps: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``W @ monomials(vars, exps)``: rows of ``W`` weight the monomials."""
    return np.asarray(W, dtype=float) @ monomials(vars_, exps)
