"""Symbolic expressions over jet coordinates.

Expressions are sympy objects. This module fixes the coordinate naming scheme,
provides a small parser for the textual grammar used in configuration files,
and supplies the numerical identity test used throughout the package.

Coordinates are real sympy symbols. For one independent variable ``x`` and a
dependent variable ``u`` the jets are named ``u, u_x, u_xx, u_xxx, u_4, u_5 ...``.
With several independent variables the suffix lists one letter per derivative
(``u_xy``) or, when the names are not single letters, ``u_(1,2)``.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import sympy as sp

from .errors import DomainError, ParseError, SamplingFailure, UnboundCoordinate

SAFE_LOW = 0.2
SAFE_HIGH = 1.7


@dataclass(frozen=True)
class JetCoord:
    """Decoded meaning of a coordinate symbol.

    ``kind`` is ``"x"`` for an independent variable, ``"u"`` for a dependent
    jet and ``"param"`` for anything else (group parameters, constants, t).
    """

    kind: str
    index: int = 0
    sigma: tuple[int, ...] = ()

    @property
    def order(self) -> int:
        return sum(self.sigma)


def _sym(name: str) -> sp.Symbol:
    return sp.Symbol(name, real=True)


@dataclass(frozen=True)
class JetSpace:
    """Naming and bookkeeping for the jet space J(R^m, R^n)."""

    indep: tuple[str, ...] = ("x",)
    dep: tuple[str, ...] = ("u",)

    def __post_init__(self):
        if not self.indep or not self.dep:
            raise ValueError("jet space needs at least one independent and one dependent variable")
        if set(self.indep) & set(self.dep):
            raise ValueError("independent and dependent names overlap")

    @property
    def m(self) -> int:
        return len(self.indep)

    @property
    def n(self) -> int:
        return len(self.dep)

    @property
    def _letters(self) -> bool:
        return all(len(s) == 1 for s in self.indep)

    def x(self, i: int = 0) -> sp.Symbol:
        return _sym(self.indep[i])

    @property
    def xs(self) -> tuple[sp.Symbol, ...]:
        return tuple(_sym(s) for s in self.indep)

    def jet_name(self, k: int, sigma: tuple[int, ...]) -> str:
        base = self.dep[k]
        order = sum(sigma)
        if order == 0:
            return base
        if self.m == 1 and self._letters:
            if order <= 3:
                return base + "_" + self.indep[0] * order
            return f"{base}_{order}"
        if self._letters:
            return base + "_" + "".join(self.indep[i] * s for i, s in enumerate(sigma))
        return base + "_(" + ",".join(str(s) for s in sigma) + ")"

    def u(self, k: int = 0, sigma: int | tuple[int, ...] = 0) -> sp.Symbol:
        if isinstance(sigma, int):
            if self.m != 1:
                raise ValueError("integer multi-index only valid when m == 1")
            sigma = (sigma,)
        if len(sigma) != self.m or min(sigma) < 0:
            raise ValueError(f"bad multi-index {sigma}")
        return _sym(self.jet_name(k, tuple(sigma)))

    def coord(self, sym: sp.Symbol) -> JetCoord:
        return _decode(self, sym.name)

    def is_jet(self, sym) -> bool:
        return isinstance(sym, sp.Symbol) and self.coord(sym).kind == "u"

    def next_jet(self, sym: sp.Symbol, i: int = 0) -> sp.Symbol:
        c = self.coord(sym)
        if c.kind != "u":
            raise ValueError(f"{sym} is not a dependent jet")
        sigma = list(c.sigma)
        sigma[i] += 1
        return self.u(c.index, tuple(sigma))

    def jets_in(self, e: sp.Expr) -> list[sp.Symbol]:
        """Dependent-jet symbols occurring in ``e`` in canonical order."""
        found = [s for s in e.free_symbols if self.is_jet(s)]
        return sorted(found, key=self.sort_key)

    def max_order(self, e: sp.Expr, component: int | None = None) -> int:
        orders = [self.coord(s).order for s in self.jets_in(e)
                  if component is None or self.coord(s).index == component]
        return max(orders, default=-1)

    def sort_key(self, sym: sp.Symbol):
        c = self.coord(sym)
        if c.kind == "x":
            return (0, c.index, (), "")
        if c.kind == "u":
            return (1, c.index, (c.order,) + tuple(-s for s in c.sigma), "")
        return (2, 0, (), sym.name)

    def jets_up_to(self, order: int, component: int | None = None) -> list[sp.Symbol]:
        comps = range(self.n) if component is None else [component]
        out = []
        for k in comps:
            for sigma in multi_indices(self.m, order):
                out.append(self.u(k, sigma))
        return sorted(out, key=self.sort_key)


def multi_indices(m: int, max_order: int) -> list[tuple[int, ...]]:
    """All multi-indices of length ``m`` with total order at most ``max_order``."""
    out: list[tuple[int, ...]] = []

    def rec(prefix, remaining, slots):
        if slots == 0:
            out.append(tuple(prefix))
            return
        for s in range(remaining + 1):
            rec(prefix + [s], remaining - s, slots - 1)

    rec([], max_order, m)
    return sorted(out, key=lambda s: (sum(s), tuple(-v for v in s)))


_SUFFIX_DIGITS = re.compile(r"^(\d+)$")
_SUFFIX_TUPLE = re.compile(r"^\((\d+(?:,\d+)*)\)$")


@functools.lru_cache(maxsize=None)
def _decode(space: JetSpace, name: str) -> JetCoord:
    if name in space.indep:
        return JetCoord("x", space.indep.index(name))
    base, sep, suffix = name.partition("_")
    comp = None
    bracket = re.fullmatch(r"([a-zA-Z][a-zA-Z0-9]*)\[(\d+)\]", base)
    if bracket and bracket.group(1) in space.dep:
        k = int(bracket.group(2)) - 1
        if 0 <= k < space.n:
            comp = k
    elif base in space.dep:
        comp = space.dep.index(base)
    if comp is None:
        return JetCoord("param")
    if not sep:
        return JetCoord("u", comp, (0,) * space.m)
    m = _SUFFIX_DIGITS.match(suffix)
    if m and space.m == 1:
        return JetCoord("u", comp, (int(m.group(1)),))
    m = _SUFFIX_TUPLE.match(suffix)
    if m:
        sigma = tuple(int(v) for v in m.group(1).split(","))
        if len(sigma) == space.m:
            return JetCoord("u", comp, sigma)
    if space._letters and suffix and all(ch in space.indep for ch in suffix):
        sigma = [0] * space.m
        for ch in suffix:
            sigma[space.indep.index(ch)] += 1
        return JetCoord("u", comp, tuple(sigma))
    return JetCoord("param")


DEFAULT_SPACE = JetSpace(("x",), ("u", "v"))


# --------------------------------------------------------------------------
# parser

_FUNCTIONS = {
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
    "cosh": sp.cosh,
    "sinh": sp.sinh,
    "acosh": sp.acosh,
    "tanh": sp.tanh,
    "sin": sp.sin,
    "cos": sp.cos,
}

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>\d+(?:\.\d+)?)"
    r"|(?P<jet>[a-zA-Z][a-zA-Z0-9]*(?:\[\d+\])?_(?:\(\d+(?:\s*,\s*\d+)*\)|[a-zA-Z0-9]+))"
    r"|(?P<name>[a-zA-Z][a-zA-Z0-9]*(?:\[\d+\])?)"
    r"|(?P<op>\*\*|[-+*/^(),])"
    r")"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        value = m.group(kind)
        start = m.start(kind)
        if kind == "jet":
            value = re.sub(r"\s+", "", value)
        if value == "**":
            value = "^"
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, space: JetSpace):
        self.tokens = _tokenize(text)
        self.i = 0
        self.space = space

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, v, pos = self.take()
        if v != value:
            raise ParseError(f"expected {value!r}, found {v or 'end of input'!r}", pos)

    def parse(self) -> sp.Expr:
        e = self.expr()
        kind, v, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {v!r}", pos)
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.term()
            e = e + rhs if op == "+" else e - rhs
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            e = e * rhs if op == "*" else e / rhs
        return e

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return -self.unary()
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return base ** self.unary()
        return base

    def atom(self):
        kind, v, pos = self.take()
        if kind == "num":
            return sp.Rational(v)
        if kind == "jet":
            sym = _sym(self._canonical_jet(v, pos))
            return sym
        if kind == "name":
            if self.peek()[1] == "(":
                if v not in _FUNCTIONS:
                    raise ParseError(f"unknown function {v!r}", pos)
                self.take()
                arg = self.expr()
                self.expect(")")
                return _FUNCTIONS[v](arg)
            if v in _FUNCTIONS:
                raise ParseError(f"function {v!r} needs an argument", pos)
            return _sym(self._canonical_jet(v, pos) if "[" in v else v)
        if v == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise ParseError(f"unexpected token {v or 'end of input'!r}", pos)

    def _canonical_jet(self, name: str, pos: int) -> str:
        c = _decode(self.space, name)
        if c.kind == "param":
            raise ParseError(f"{name!r} is not a jet coordinate of this space", pos)
        if c.kind == "x":
            return name
        return self.space.jet_name(c.index, c.sigma)


def parse_expr(text: str, space: JetSpace = DEFAULT_SPACE) -> sp.Expr:
    """Parse ``text`` according to the expression grammar.

    Identifiers that are not coordinates of ``space`` become parameters.
    Decimal literals are read as exact rationals.
    """
    if not isinstance(text, str):
        raise ParseError("expression must be a string")
    return _Parser(text, space).parse()


class _GrammarPrinter(sp.printing.str.StrPrinter):
    def _print_Pow(self, expr, rational=False):
        out = super()._print_Pow(expr, rational)
        return out.replace("**", "^")

    def _print_Float(self, expr):
        return str(sp.Rational(str(expr)))


def to_text(e: sp.Expr) -> str:
    """Render ``e`` in the parser grammar (``parse_expr(to_text(e))`` gives ``e`` back)."""
    return _GrammarPrinter().doprint(e).replace("**", "^")


# --------------------------------------------------------------------------
# algebra

def canonical(e: sp.Expr) -> sp.Expr:
    """Expanded normal form. Exponentials of sums are left alone."""
    return sp.expand(sp.sympify(e), power_exp=False, log=False, multinomial=True)


def diff_partial(e: sp.Expr, c: sp.Symbol) -> sp.Expr:
    return sp.diff(e, c)


def substitute(e: sp.Expr, bindings: Mapping, canonicalize: bool = True) -> sp.Expr:
    """Simultaneous substitution of coordinates by expressions."""
    mapping = {(_sym(k) if isinstance(k, str) else k): sp.sympify(v) for k, v in bindings.items()}
    out = sp.sympify(e).xreplace(mapping)
    return canonical(out) if canonicalize else out


@functools.lru_cache(maxsize=4096)
def _scalar_function(e: sp.Expr, symbols: tuple[sp.Symbol, ...]):
    terms = sp.Add.make_args(e)
    return sp.lambdify(symbols, [e, *terms] if len(terms) > 1 else [e], modules="math")


def _normalize_point(point: Mapping) -> dict:
    out = {}
    for k, v in point.items():
        out[_sym(k) if isinstance(k, str) else k] = v
    return out


def _eval_terms(e: sp.Expr, point: dict) -> list[float]:
    symbols = tuple(sorted(e.free_symbols, key=lambda s: s.name))
    for s in symbols:
        if s not in point:
            raise UnboundCoordinate(s.name)
    fn = _scalar_function(e, symbols)
    try:
        vals = fn(*[float(point[s]) for s in symbols])
    except (ValueError, ZeroDivisionError, OverflowError) as exc:
        raise DomainError(f"cannot evaluate at this point: {exc}") from None
    out = []
    for v in vals:
        if isinstance(v, complex):
            if abs(v.imag) > 1e-12 * max(1.0, abs(v.real)):
                raise DomainError("expression is not real at this point")
            v = v.real
        v = float(v)
        if not math.isfinite(v):
            raise DomainError("expression is not finite at this point")
        out.append(v)
    return out


def eval_at(e: sp.Expr, point: Mapping) -> float:
    """Evaluate ``e`` at a point given as a map from symbols (or names) to reals."""
    e = sp.sympify(e)
    return _eval_terms(e, _normalize_point(point))[0]


def sample_point(symbols: Iterable[sp.Symbol], rng: np.random.Generator,
                 low: float = SAFE_LOW, high: float = SAFE_HIGH) -> dict:
    return {s: float(rng.uniform(low, high)) for s in symbols}


def is_zero(e: sp.Expr, trials: int = 8, tol: float = 1e-9,
            rng: np.random.Generator | None = None, fixed: Mapping | None = None,
            sampler=None, max_attempts: int = 1000) -> bool:
    """Numerical zero test at random points of the safe domain.

    A point counts as zero when ``|e| <= tol * (1 + max |term|)`` where the
    terms are the top-level summands. ``fixed`` pins some symbols; ``sampler``
    may replace the default uniform sampler on ``[0.2, 1.7]`` and receives
    ``(symbols, rng)``.
    """
    e = sp.sympify(e)
    if e == 0:
        return True
    fixed = _normalize_point(fixed or {})
    if e.free_symbols <= set(fixed):
        vals = _eval_terms(e, fixed)
        return abs(vals[0]) <= tol * (1 + max(abs(v) for v in vals))
    rng = rng if rng is not None else np.random.default_rng(20240601)
    free = sorted(e.free_symbols - set(fixed), key=lambda s: s.name)
    draw = sampler or (lambda syms, g: sample_point(syms, g))
    done = attempts = 0
    while done < trials:
        if attempts >= max_attempts:
            raise SamplingFailure(f"no valid sample point after {max_attempts} attempts")
        attempts += 1
        point = dict(fixed)
        point.update(draw(free, rng))
        try:
            vals = _eval_terms(e, point)
        except DomainError:
            continue
        scale = max(abs(v) for v in vals)
        if abs(vals[0]) > tol * (1 + scale):
            return False
        done += 1
    return True


def vector_function(exprs: list, symbols: list):
    """Vectorised numpy evaluator returning a list of arrays broadcast together."""
    exprs = [sp.sympify(e) for e in exprs]
    fn = sp.lambdify(list(symbols), exprs, modules="numpy")

    def call(*args):
        vals = fn(*args)
        shape = np.broadcast_shapes(*[np.shape(a) for a in args]) if args else ()
        return [np.broadcast_to(np.asarray(v, dtype=float), shape).copy() for v in vals]

    return call
