"""Independent numerical checks of candidate solution fields.

``fd_residual`` measures how well a gridded field satisfies
``u_t = sum_k c_k(t) F_k`` using centred finite differences, and
``mol_reference`` integrates the same equation by the method of lines
(centred differences in x, classical RK4 in t) for cross-validation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import sympy as sp

from . import kernels
from .errors import ConfigError, GridTooCoarse, InstabilityDetected
from .reduce import CoefficientSet, SolutionField

log = logging.getLogger(__name__)

STEP_FACTOR = 0.2
GROWTH_LIMIT = 10.0


# --------------------------------------------------------------------------
# right-hand side tables


class RhsTable:
    """``sum_k c_k F_k`` evaluated on stencil jets.

    Polynomial generators are stored as a monomial table (exponents over the
    variables ``x, u^r_0 .. u^r_q``) with one coefficient matrix per forcing
    term, so evaluation is a monomial kernel followed by a small product.
    Anything else is lambdified.
    """

    def __init__(self, problem):
        gens = problem.all_generators()
        space = problem.space
        consts = problem.constant_symbols
        self.n = space.n
        self.ncoef = len(gens)
        self.q = max(1, max(g.order for g in gens))
        self.vars = [space.x()] + [space.u(r, s) for r in range(self.n) for s in range(self.q + 1)]
        exprs = [[sp.sympify(c).xreplace(consts) for c in g.components] for g in gens]
        self.polynomial = True
        index: dict[tuple, int] = {}
        entries = []
        try:
            for k, comps in enumerate(exprs):
                for r, e in enumerate(comps):
                    poly = sp.Poly(sp.expand(e), *self.vars)
                    for mono, c in poly.terms():
                        if not c.is_number:
                            raise sp.PolynomialError("symbolic coefficient")
                        m = index.setdefault(mono, len(index))
                        entries.append((k, r, m, float(c)))
        except sp.PolynomialError:
            self.polynomial = False
        if self.polynomial:
            self.exps = np.array(list(index), dtype=np.int64).reshape(len(index), len(self.vars))
            self.C = np.zeros((self.ncoef, self.n, len(index)))
            for k, r, m, c in entries:
                self.C[k, r, m] += c
        else:
            self._fns = [[sp.lambdify(self.vars, e, modules="numpy") for e in comps] for comps in exprs]

    def _stack(self, x: np.ndarray, jets: np.ndarray) -> np.ndarray:
        # jets: (q+1, n, P) flattened over points
        P = x.size
        out = np.empty((len(self.vars), P))
        out[0] = x
        for r in range(self.n):
            out[1 + r * (self.q + 1): 1 + (r + 1) * (self.q + 1)] = jets[:, r, :]
        return out

    def evaluate(self, x: np.ndarray, jets: np.ndarray, cvals: np.ndarray) -> np.ndarray:
        """RHS with shape (n, P). ``cvals`` is (ncoef,) or (ncoef, P)."""
        jets = jets.reshape(jets.shape[0], self.n, -1)
        stacked = self._stack(np.broadcast_to(np.ravel(x), jets.shape[2:]), jets)
        cvals = np.asarray(cvals, dtype=float)
        if self.polynomial:
            if cvals.ndim == 1:
                return kernels.poly_eval(stacked, self.exps, np.einsum("k,krm->rm", cvals, self.C))
            M = kernels.monomials(stacked, self.exps)
            return np.einsum("kp,krm,mp->rp", cvals, self.C, M)
        out = np.zeros((self.n, stacked.shape[1]))
        cv = cvals if cvals.ndim == 2 else cvals[:, None]
        for k, fns in enumerate(self._fns):
            for r, f in enumerate(fns):
                out[r] += cv[k] * np.broadcast_to(np.asarray(f(*stacked), dtype=float), out[r].shape)
        return out


def _uniform_step(grid: np.ndarray, what: str) -> float:
    d = np.diff(grid)
    if d.size == 0 or np.any(d <= 0):
        raise ConfigError(f"{what} grid must be strictly increasing")
    h = float(d.mean())
    if np.max(np.abs(d - h)) > 1e-9 * max(1.0, abs(h)):
        raise ConfigError(f"{what} grid must be uniform")
    return h


def _coeffs(problem, coeffs) -> CoefficientSet:
    if isinstance(coeffs, CoefficientSet):
        return coeffs
    return problem.coefficients(coeffs)


# --------------------------------------------------------------------------
# residuals


@dataclass
class ResidualReport:
    max_abs: float
    l2: float
    per_slice: np.ndarray
    orders: list = field(default_factory=list)
    grid_meta: dict = field(default_factory=dict)
    levels: list = field(default_factory=list)

    @property
    def order(self) -> float | None:
        good = [o for o in self.orders if o is not None]
        return good[-1] if good else None

    def to_dict(self) -> dict:
        return {
            "max_abs": float(self.max_abs),
            "l2": float(self.l2),
            "per_slice": [float(v) for v in self.per_slice],
            "orders": [None if o is None else float(o) for o in self.orders],
            "grid": self.grid_meta,
            "levels": self.levels,
        }


def _residual_arrays(fld: SolutionField, problem, coeffs: CoefficientSet, table: RhsTable):
    names = [str(problem.space.u(r)) for r in range(problem.n)]
    missing = [n for n in names if n not in fld.values]
    if missing:
        raise ConfigError(f"field lacks component(s) {missing}")
    t, x = fld.t_grid, fld.x_grid
    h = kernels.halfwidth(table.q)
    if t.size < 3 or x.size < 2 * h + 3:
        raise GridTooCoarse(f"grid {t.size}x{x.size} too small for a {2 * h + 1}-point stencil "
                            "and centred time differences")
    dt = _uniform_step(t, "t")
    dx = _uniform_step(x, "x")
    U = np.stack([fld.values[n] for n in names])  # (n, nt, nx)
    ut = (U[:, 2:, :] - U[:, :-2, :]) / (2 * dt)
    inner = U[:, 1:-1, :]
    nti = inner.shape[1]
    jets = kernels.central_jets(inner.reshape(-1, x.size), table.q, dx, False)
    jets = jets.reshape(table.q + 1, problem.n, nti, x.size)[..., h:-h]
    xs = np.broadcast_to(x[h:-h], (nti, x.size - 2 * h))
    cv = coeffs(t[1:-1])  # (ncoef, nti)
    cv = np.repeat(cv[:, :, None], x.size - 2 * h, axis=2).reshape(cv.shape[0], -1)
    rhs = table.evaluate(xs.ravel(), jets.reshape(table.q + 1, problem.n, -1), cv)
    R = ut[..., h:-h] - rhs.reshape(problem.n, nti, -1)
    return R, {"nt": int(t.size), "nx": int(x.size), "dt": dt, "dx": dx, "margin_x": h, "margin_t": 1}


def fd_residual(fld: SolutionField, problem, coeffs=None,
                refined: Sequence[SolutionField] = ()) -> ResidualReport:
    """Finite-difference residual of ``fld`` on interior grid points.

    With ``refined`` fields (successively finer grids) the observed order of
    convergence between consecutive levels is reported from the RMS norms.
    """
    coeffs = _coeffs(problem, coeffs)
    table = RhsTable(problem)
    levels = []
    first = None
    for f in [fld, *refined]:
        R, meta = _residual_arrays(f, problem, coeffs, table)
        absR = np.abs(R)
        entry = dict(meta, max_abs=float(absR.max()), l2=float(np.sqrt(np.mean(R ** 2))))
        levels.append(entry)
        if first is None:
            first = (R, meta)
    orders = []
    for a, b in zip(levels, levels[1:]):
        ratio = a["dx"] / b["dx"]
        if a["l2"] > 0 and b["l2"] > 0 and ratio > 1 and math.isfinite(a["l2"]) and math.isfinite(b["l2"]):
            orders.append(math.log(a["l2"] / b["l2"]) / math.log(ratio))
        else:
            orders.append(None)
    R, meta = first
    per_slice = np.abs(R).max(axis=(0, 2))
    return ResidualReport(levels[0]["max_abs"], levels[0]["l2"], per_slice, orders, meta,
                          levels if refined else [])


# --------------------------------------------------------------------------
# method of lines


def _initial_values(problem, profile, x: np.ndarray) -> np.ndarray:
    n = problem.n
    names = [str(problem.space.u(r)) for r in range(n)]
    if isinstance(profile, Mapping):
        profile = [profile[nm] for nm in names]
    elif isinstance(profile, (list, tuple)) and (n > 1 or len(profile) != x.size):
        profile = list(profile)
    elif isinstance(profile, np.ndarray) and profile.ndim == 2:
        profile = list(profile)
    else:
        profile = [profile]
    if len(profile) != n:
        raise ConfigError(f"initial profile needs {n} component(s)")
    X = problem.space.x()
    out = np.empty((n, x.size))
    for r, p in enumerate(profile):
        if isinstance(p, (str, sp.Basic)):
            e = problem.parse(p) if isinstance(p, str) else p
            e = e.xreplace(problem.constant_symbols)
            if e.free_symbols - {X}:
                raise ConfigError(f"initial profile {e} may only depend on {X}")
            vals = sp.lambdify([X], e, modules="numpy")(x)
        elif callable(p):
            vals = p(x)
        else:
            vals = p
        out[r] = np.broadcast_to(np.asarray(vals, dtype=float), x.shape)
    return out


def step_bound(dx: float, q: int) -> float:
    """Largest admitted explicit time step for a problem of x-order ``q``."""
    return STEP_FACTOR * dx ** max(1, q)


def mol_reference(problem, initial_profile, coeffs, x_grid, t_out,
                  boundary: str | Callable = "periodic", dt: float | None = None,
                  check_bound: bool = True) -> SolutionField:
    """Method-of-lines solution sampled at the times ``t_out`` (first entry is the start).

    ``boundary="periodic"`` treats ``x_grid`` as one period without a repeated
    endpoint. A callable ``boundary(t, x_edge)`` gives Dirichlet values on the
    stencil margin (shape ``(n, len(x_edge))`` or ``(len(x_edge),)``).
    """
    coeffs = _coeffs(problem, coeffs)
    x = np.asarray(x_grid, dtype=float)
    t_out = np.asarray(t_out, dtype=float)
    if t_out.ndim != 1 or t_out.size < 1 or np.any(np.diff(t_out) <= 0):
        raise ConfigError("output times must be strictly increasing")
    coeffs.check_interval(float(t_out[0]), float(t_out[-1]))
    table = RhsTable(problem)
    h = kernels.halfwidth(table.q)
    if x.size < 2 * h + 3:
        raise GridTooCoarse(f"{x.size} x-points are too few for the {2 * h + 1}-point stencil")
    dx = _uniform_step(x, "x")
    bound = step_bound(dx, table.q)
    if dt is None:
        dt = bound
    elif dt > bound * (1 + 1e-12) and check_bound:
        raise ConfigError(f"time step {dt:.3g} exceeds the admitted bound {bound:.3g}")
    periodic = boundary == "periodic"
    if not periodic and not callable(boundary):
        raise ConfigError("boundary must be 'periodic' or a callable giving edge values")
    edge = np.r_[np.arange(h), np.arange(x.size - h, x.size)]
    x_edge = x[edge]
    n = problem.n

    def apply_bc(u, t):
        if periodic:
            return u
        vals = np.asarray(boundary(t, x_edge), dtype=float).reshape(n, edge.size)
        u = u.copy()
        u[:, edge] = vals
        return u

    def rhs(t, u):
        jets = kernels.central_jets(u, table.q, dx, periodic)
        out = table.evaluate(x, jets, coeffs(t))
        if not periodic:
            out[:, edge] = 0.0
        return out

    u = apply_bc(_initial_values(problem, initial_profile, x), float(t_out[0]))
    frames = [u.copy()]
    total = 0
    t = float(t_out[0])
    for t_next in t_out[1:]:
        steps = max(1, int(math.ceil((t_next - t) / dt - 1e-9)))
        k = (t_next - t) / steps
        for s in range(steps):
            ts = t + s * k
            old = float(np.max(np.abs(u)))
            k1 = rhs(ts, u)
            k2 = rhs(ts + k / 2, apply_bc(u + k / 2 * k1, ts + k / 2))
            k3 = rhs(ts + k / 2, apply_bc(u + k / 2 * k2, ts + k / 2))
            k4 = rhs(ts + k, apply_bc(u + k * k3, ts + k))
            u = apply_bc(u + k / 6 * (k1 + 2 * k2 + 2 * k3 + k4), ts + k)
            new = float(np.max(np.abs(u)))
            if not math.isfinite(new) or (old > 0 and new > GROWTH_LIMIT * old):
                raise InstabilityDetected(ts + k)
        total += steps
        t = float(t_next)
        frames.append(u.copy())
    names = [str(problem.space.u(r)) for r in range(n)]
    U = np.stack(frames, axis=1)
    meta = {"label": f"mol:{problem.label}", "dt_max": dt, "steps": total, "boundary":
            "periodic" if periodic else "dirichlet", "backend": kernels.BACKEND}
    return SolutionField(t_out, x, {nm: U[r] for r, nm in enumerate(names)}, meta)
