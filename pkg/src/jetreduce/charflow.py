"""Characteristic fields and their flows on the jet space.

A generator ``G`` with shifts ``h`` defines the characteristic field
``Vbar = V_G - sum_i h^i D_i``. Its flow acts on functions by pullback; the
pullback of the base coordinates is supplied in closed form and extended to
the higher jets by the prolongation recursion

    pullback(D_i f) = sum_j B[i, j] * D_j(pullback(f)),   B = M^{-1},
    M[i, j] = D_i(pullback(x^j)).
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import sympy as sp

from .errors import (DegenerateSampling, DomainError, FlowEscaped, GeneratorMismatch, NotScalar,
                     OrderTooHigh, SingularJacobian, UnboundCoordinate)
from .jetcalc import Generator, apply_evolution, total_derivative
from .symexpr import JetSpace, _eval_terms, is_zero, sample_point, vector_function

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CharField:
    generator: Generator
    shifts: tuple

    def __post_init__(self):
        sh = tuple(sp.sympify(s) for s in self.shifts)
        if len(sh) != self.generator.space.m:
            raise ValueError("one shift per independent variable is required")
        object.__setattr__(self, "shifts", sh)

    @property
    def space(self) -> JetSpace:
        return self.generator.space

    def apply(self, e: sp.Expr) -> sp.Expr:
        e = sp.sympify(e)
        out = apply_evolution(self.generator, e)
        for i, h in enumerate(self.shifts):
            if h != 0:
                out -= h * total_derivative(e, self.space, i)
        return out

    def on_coordinate(self, c: sp.Symbol) -> sp.Expr:
        """Component of the field along one coordinate symbol."""
        info = self.space.coord(c)
        if info.kind == "x":
            return -self.shifts[info.index]
        if info.kind == "u":
            return self.apply(c)
        return sp.Integer(0)


def characteristic_field(G: Generator, shifts: Sequence | None = None) -> CharField:
    if shifts is None:
        shifts = (0,) * G.space.m
    return CharField(G, tuple(shifts))


def first_order_char(G: Generator) -> tuple[Generator, tuple]:
    """Split a scalar first-order generator into its order-zero part and shifts.

    ``G = g0(x, u) + sum_i h^i(x, u) u_{x_i}``; returns ``(g0, h)``.
    """
    space = G.space
    if space.n != 1:
        raise NotScalar("first-order splitting needs a scalar generator")
    g = sp.expand(G.components[0])
    if space.max_order(g) > 1:
        raise OrderTooHigh(f"generator {g} has order {space.max_order(g)}")
    first = [space.u(0, tuple(int(j == i) for j in range(space.m))) for i in range(space.m)]
    shifts = []
    for c in first:
        h = sp.diff(g, c)
        if any(s in h.free_symbols for s in first):
            raise OrderTooHigh(f"generator {g} is not affine in the first derivatives")
        shifts.append(h)
    g0 = sp.expand(g - sum(h * c for h, c in zip(shifts, first)))
    return Generator((g0,), space), tuple(shifts)


@dataclass
class FiltrationReport:
    ok: bool
    worst_residual: float
    failures: list = field(default_factory=list)


def filtration_check(G0: Sequence[sp.Expr], fields: Sequence[CharField], samples: int = 20,
                     tol: float = 1e-7, rng: np.random.Generator | None = None,
                     fixed: Mapping | None = None) -> FiltrationReport:
    """Check that each field maps the functions ``G0`` into functions of ``G0``.

    At every sample point the gradient of ``Vbar(g)`` has to lie in the row
    space of the Jacobian of ``G0``.
    """
    if samples < 20:
        raise ValueError("filtration check needs at least 20 points")
    rng = rng if rng is not None else np.random.default_rng(11)
    G0 = [sp.sympify(g) for g in G0]
    space = fields[0].space
    images = [(fi, gi, fld.apply(g)) for fi, fld in enumerate(fields) for gi, g in enumerate(G0)]
    coords = set()
    for e in G0 + [img for *_, img in images]:
        coords |= {s for s in e.free_symbols if space.coord(s).kind in ("x", "u")}
    coords = sorted(coords, key=space.sort_key)
    params = set()
    for e in G0 + [img for *_, img in images]:
        params |= {s for s in e.free_symbols if space.coord(s).kind == "param"}
    params -= set(fixed or {})
    jac = vector_function([sp.diff(g, c) for g in G0 for c in coords], coords + sorted(params, key=str))
    grads = vector_function([sp.diff(img, c) for *_, img in images for c in coords],
                            coords + sorted(params, key=str))
    fixed_vals = dict(fixed or {})
    worst = 0.0
    failures = []
    got = attempts = 0
    while got < samples:
        attempts += 1
        if attempts > 1000:
            raise DegenerateSampling("no valid points for the filtration check")
        pt = sample_point(coords + sorted(params, key=str), rng)
        args = [pt[s] for s in coords] + [pt[s] for s in sorted(params, key=str)]
        with np.errstate(all="ignore"):
            J = np.array(jac(*args), dtype=float).reshape(len(G0), len(coords))
            gr = np.array(grads(*args), dtype=float).reshape(len(images), len(coords))
        if not (np.all(np.isfinite(J)) and np.all(np.isfinite(gr))):
            continue
        got += 1
        for row, (fi, gi, img) in zip(gr, images):
            coef, *_ = np.linalg.lstsq(J.T, row, rcond=None)
            res = float(np.linalg.norm(J.T @ coef - row) / (1.0 + np.linalg.norm(row)))
            worst = max(worst, res)
            if res > tol and (fi, gi) not in [(f[0], f[1]) for f in failures]:
                failures.append((fi, gi, img))
    return FiltrationReport(not failures, worst, failures)


def _tidy(e: sp.Expr) -> sp.Expr:
    try:
        return sp.cancel(sp.together(e))
    except (sp.PolynomialError, NotImplementedError):
        return sp.together(e)


class FlowMap:
    """Pullback action of the flow of a characteristic field, parameter ``param``."""

    def __init__(self, char: CharField, param: sp.Symbol, base: Mapping[sp.Symbol, sp.Expr]):
        self.char = char
        self.param = param
        self.space = char.space
        self.base = {k: sp.sympify(v) for k, v in base.items()}
        for c in self.space.xs + tuple(self.space.u(k, (0,) * self.space.m) for k in range(self.space.n)):
            self.base.setdefault(c, c if char.on_coordinate(c) == 0 else None)
            if self.base[c] is None:
                raise ValueError(f"closed form for the pullback of {c} is required")
        self._cache: dict = dict(self.base)
        self._lock = threading.Lock()
        self._jac = None

    def jacobian(self) -> "FlowJacobian":
        if self._jac is None:
            self._jac = FlowJacobian.of(self)
        return self._jac

    def coordinate(self, c: sp.Symbol) -> sp.Expr:
        hit = self._cache.get(c)
        if hit is not None:
            return hit
        info = self.space.coord(c)
        if info.kind == "param":
            return c
        i = next(j for j, s in enumerate(info.sigma) if s > 0)
        lower = list(info.sigma)
        lower[i] -= 1
        prev = self.coordinate(self.space.u(info.index, tuple(lower)))
        B = self.jacobian().inverse
        val = sum(B[i, j] * total_derivative(prev, self.space, j) for j in range(self.space.m))
        val = _tidy(val)
        with self._lock:
            self._cache.setdefault(c, val)
        return self._cache[c]

    def pullback(self, e: sp.Expr) -> sp.Expr:
        e = sp.sympify(e)
        coords = [s for s in e.free_symbols if self.space.coord(s).kind in ("x", "u")]
        return e.xreplace({c: self.coordinate(c) for c in coords})


@dataclass
class FlowJacobian:
    matrix: sp.Matrix
    inverse: sp.Matrix

    @classmethod
    def of(cls, fm: FlowMap) -> "FlowJacobian":
        sp_ = fm.space
        M = sp.Matrix(sp_.m, sp_.m, lambda i, j: total_derivative(fm.base[sp_.x(j)], sp_, i))
        det = _tidy(M.det())
        if is_zero(det):
            raise SingularJacobian(f"pulled-back coordinate jacobian vanishes for flow {fm.param}")
        if sp_.m == 1:
            inv = sp.Matrix([[1 / det]])
        else:
            inv = (M.adjugate() / det).applyfunc(_tidy)
        return cls(M, inv)


def prolong_flow(fm: FlowMap, c: sp.Symbol) -> sp.Expr:
    return fm.coordinate(c)


def register_closed_form_flow(char: CharField, param: sp.Symbol, base: Mapping,
                              rng: np.random.Generator | None = None) -> FlowMap:
    """Validate closed-form pullbacks against the field and wrap them as a FlowMap."""
    base = {k: sp.sympify(v) for k, v in base.items()}
    for c, expr in base.items():
        at0 = sp.sympify(expr).subs(param, 0)
        if not is_zero(at0 - c, rng=rng):
            raise GeneratorMismatch(str(c), "pullback is not the identity at parameter zero")
        rate = sp.diff(expr, param).subs(param, 0)
        if not is_zero(rate - char.on_coordinate(c), rng=rng):
            raise GeneratorMismatch(str(c))
    return FlowMap(char, param, base)


def compose_pullback(flows: Sequence[FlowMap], e: sp.Expr) -> sp.Expr:
    """``flows[0]*(flows[1]*(... flows[-1]*(e)))``."""
    for fm in reversed(list(flows)):
        e = fm.pullback(e)
    return e


def _dependency_closure(char: CharField, coords: list[sp.Symbol], max_order: int):
    space = char.space
    todo = list(coords)
    rates = {}
    while todo:
        c = todo.pop()
        if c in rates:
            continue
        if space.coord(c).kind == "u" and space.coord(c).order > max_order:
            raise OrderTooHigh(f"characteristic flow does not close below order {max_order}")
        r = char.on_coordinate(c)
        rates[c] = r
        for s in r.free_symbols:
            if space.coord(s).kind in ("x", "u") and s not in rates:
                todo.append(s)
    return rates


def numeric_flow(char: CharField, point: Mapping, a: float, order: int, tol: float = 1e-10,
                 escape: float = 1e12, constants: Mapping | None = None,
                 max_extra_order: int = 8) -> dict:
    """Integrate ``d z / d s = Vbar(z)`` from ``s = 0`` to ``s = a``.

    Coordinates up to ``order`` are tracked together with whatever else their
    rates depend on. Integration is classical RK4 with step-doubling error
    control; leaving the ball of radius ``escape`` raises FlowEscaped.
    """
    space = char.space
    start = [space.x(i) for i in range(space.m)] + space.jets_up_to(order)
    rates = _dependency_closure(char, start, order + max_extra_order)
    coords = sorted(rates, key=space.sort_key)
    const = {(sp.Symbol(k, real=True) if isinstance(k, str) else k): float(v)
             for k, v in (constants or {}).items()}
    pt = {(sp.Symbol(k, real=True) if isinstance(k, str) else k): float(v) for k, v in point.items()}
    missing = [c for c in coords if c not in pt]
    if missing:
        raise UnboundCoordinate(str(missing[0]))
    exprs = [rates[c].xreplace({k: sp.Float(v) for k, v in const.items()}) for c in coords]
    extra = sorted(set().union(*[e.free_symbols for e in exprs]) - set(coords), key=str)
    if extra:
        raise UnboundCoordinate(str(extra[0]))
    f = vector_function(exprs, coords)

    def rhs(z):
        return np.array(f(*z), dtype=float)

    z = np.array([pt[c] for c in coords], dtype=float)
    s, target = 0.0, float(a)
    direction = 1.0 if target >= 0 else -1.0
    h = direction * min(0.01, abs(target)) if target != 0 else 0.0

    def rk4(z, h):
        k1 = rhs(z)
        k2 = rhs(z + 0.5 * h * k1)
        k3 = rhs(z + 0.5 * h * k2)
        k4 = rhs(z + h * k3)
        return z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    steps = 0
    while direction * (target - s) > 0:
        if abs(h) > abs(target - s):
            h = target - s
        with np.errstate(all="ignore"):
            full = rk4(z, h)
            half = rk4(rk4(z, h / 2), h / 2)
        if not (np.all(np.isfinite(half)) and np.all(np.isfinite(full))):
            h /= 4
            if abs(h) < 1e-15 * max(1.0, abs(s)):
                raise FlowEscaped(s)
            continue
        err = np.max(np.abs(half - full) / (1.0 + np.abs(half))) / 15
        if err <= tol:
            z = half + (half - full) / 15
            s += h
            steps += 1
            if np.max(np.abs(z)) > escape:
                raise FlowEscaped(s)
            grow = 2.0 if err == 0 else min(2.0, 0.9 * (tol / err) ** 0.2)
            h *= max(grow, 0.3)
        else:
            h *= max(0.1, 0.9 * (tol / err) ** 0.2)
            if abs(h) < 1e-14 * max(1.0, abs(s)):
                raise FlowEscaped(s)
    log.debug("numeric_flow: %d accepted steps", steps)
    return {c: float(v) for c, v in zip(coords, z)}
