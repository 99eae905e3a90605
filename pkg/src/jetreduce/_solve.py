"""Pattern-directed elimination for the small nonlinear systems met here.

Equations are cleared of denominators and of factors that cannot vanish
(exponentials, numbers, factors free of the unknowns). Unknowns are then
eliminated one at a time, picking the easiest available (equation, unknown)
pair: linear, linear in ``exp(g*p)``, binomial, quadratic. Every root of a
quadratic opens a branch; all complete branches are returned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import sympy as sp

log = logging.getLogger(__name__)

MAX_BRANCHES = 16


def _nonvanishing(f: sp.Expr, unknowns: set) -> bool:
    if f.is_number:
        return f != 0
    if not (f.free_symbols & unknowns):
        return True
    if isinstance(f, sp.exp):
        return True
    if isinstance(f, sp.Pow) and isinstance(f.base, sp.exp):
        return True
    return False


def clean(e: sp.Expr, unknowns: set) -> list[sp.Expr]:
    """Return the factors of the numerator of ``e`` that may vanish."""
    e = sp.together(sp.sympify(e))
    num = sp.numer(e)
    num = sp.expand(num, power_exp=False, log=False)
    if num == 0:
        return [sp.Integer(0)]
    num = sp.factor_terms(num)
    out = []
    for f in sp.Mul.make_args(num):
        base = f
        if isinstance(f, sp.Pow) and f.exp.is_Integer and f.exp > 0:
            base = f.base
        if _nonvanishing(base, unknowns):
            continue
        out.append(base)
    return out


@dataclass
class _Step:
    score: int
    size: int
    eq_index: int
    factor: sp.Expr
    unknown: sp.Symbol
    roots: list


def _rational_gcd(values):
    g = None
    for v in values:
        v = sp.Rational(v)
        g = abs(v) if g is None else sp.gcd(g, abs(v))
    return g


def _exp_substitution(f: sp.Expr, p: sp.Symbol):
    """Rewrite ``f`` as a polynomial in ``Q = exp(g*p)`` when p only enters through exponentials."""
    atoms = [a for a in f.atoms(sp.exp) if p in a.free_symbols]
    if not atoms:
        return None
    ks = []
    for a in atoms:
        arg = sp.expand(a.args[0])
        k = sp.diff(arg, p)
        if not k.is_Rational or k == 0:
            return None
        ks.append(k)
    g = _rational_gcd(ks)
    Q = sp.Dummy("Q", positive=True)
    repl = {}
    for a, k in zip(atoms, ks):
        rest = sp.expand(a.args[0]) - k * p
        repl[a] = sp.exp(rest) * Q ** (k / g)
    f2 = f.xreplace(repl)
    if p in f2.free_symbols:
        return None
    f2 = sp.numer(sp.together(f2))
    return f2, Q, g


def _poly_roots(f: sp.Expr, var: sp.Symbol):
    """Roots of ``f`` as a polynomial in ``var`` (degree <= 2 or binomial), or None."""
    poly = sp.Poly(sp.expand(f, power_exp=False, log=False), var) if f.has(var) else None
    if poly is None:
        return None
    try:
        coeffs = poly.all_coeffs()
    except sp.PolynomialError:
        return None
    if any(var in c.free_symbols for c in coeffs):
        return None
    deg = poly.degree()
    if deg == 1:
        return 0, [sp.cancel(-coeffs[1] / coeffs[0])]
    nonzero = [i for i, c in enumerate(coeffs) if c != 0]
    if deg >= 2 and len(nonzero) == 2 and nonzero[1] == deg:
        # c_n v^n + c_0 = 0 (possibly with a common power of v factored out)
        val = sp.cancel(-coeffs[deg] / coeffs[0])
        if deg % 2 == 0:
            r = val ** sp.Rational(1, deg)
            return 2, [r, -r]
        return 2, [sp.sign(val) * sp.Abs(val) ** sp.Rational(1, deg)]
    if deg >= 2 and len(nonzero) == 2 and nonzero[0] == 0:
        low = deg - nonzero[1]
        # c_n v^n + c_k v^k, drop the v^k factor
        val = sp.cancel(-coeffs[nonzero[1]] / coeffs[0])
        n = deg - low
        if n == 1:
            return 0, [val]
        r = val ** sp.Rational(1, n)
        return 2, ([r, -r] if n % 2 == 0 else [r])
    if deg == 2:
        A, B, C = coeffs
        disc = sp.expand(B ** 2 - 4 * A * C)
        s = sp.sqrt(disc)
        return 3, [(-B + s) / (2 * A), (-B - s) / (2 * A)]
    return None


def _classify(f: sp.Expr, p: sp.Symbol):
    res = _poly_roots(f, p) if not any(p in a.free_symbols for a in f.atoms(sp.exp, sp.log)) else None
    if res is not None:
        return res
    sub = _exp_substitution(f, p)
    if sub is None:
        return None
    f2, Q, g = sub
    res = _poly_roots(f2, Q)
    if res is None:
        return None
    score, roots = res
    return score + 1, [sp.log(r) / g for r in roots]


def _choose(eqs: list[list[sp.Expr]], unknowns: list[sp.Symbol]):
    best = None
    for i, factors in enumerate(eqs):
        for f in factors:
            for p in unknowns:
                if p not in f.free_symbols:
                    continue
                res = _classify(f, p)
                if res is None:
                    continue
                score, roots = res
                size = sp.count_ops(f)
                cand = _Step(score, size, i, f, p, roots)
                if best is None or (cand.score, cand.size) < (best.score, best.size):
                    best = cand
    return best


def _back_substitute(steps: list[tuple[sp.Symbol, sp.Expr]]) -> dict:
    sol: dict = {}
    for p, v in reversed(steps):
        sol[p] = v.xreplace(sol)
    return sol


def _fallback(eqs, unknowns):
    """Last resort: hand the cleaned polynomial system to sympy.solve."""
    flat = []
    for factors in eqs:
        if len(factors) != 1:
            return []
        flat.append(factors[0])
    subs, back = {}, {}
    work = list(flat)
    for p in unknowns:
        probe = [_exp_substitution(f, p) if f.has(p) else None for f in work]
        if all(pr is None or pr[0] is not None for pr in probe) and any(pr is not None for pr in probe):
            gs = {pr[2] for pr in probe if pr is not None}
            if len(gs) != 1:
                continue
            g = gs.pop()
            Q = sp.Symbol(f"Q_{p.name}", positive=True)
            work = [f.xreplace({a: sp.exp(sp.expand(a.args[0]) - sp.diff(sp.expand(a.args[0]), p) * p)
                                * Q ** (sp.diff(sp.expand(a.args[0]), p) / g)
                                for a in f.atoms(sp.exp) if p in a.free_symbols}) for f in work]
            work = [sp.numer(sp.together(f)) for f in work]
            subs[p] = Q
            back[Q] = (p, g)
    targets = [subs.get(p, p) for p in unknowns]
    try:
        sols = sp.solve(work, targets, dict=True)
    except (NotImplementedError, sp.PolynomialError):
        return []
    out = []
    for s in sols:
        d = {}
        for t in targets:
            if t not in s:
                break
            if t in back:
                p, g = back[t]
                d[p] = sp.log(s[t]) / g
            else:
                d[t] = s[t]
        else:
            out.append(d)
    return out


def solve_system(equations: list[sp.Expr], unknowns: list[sp.Symbol]) -> list[dict]:
    """All branch solutions found for ``equations == 0`` in ``unknowns``."""
    unknowns = list(unknowns)
    results: list[dict] = []

    def rec(eqs, remaining, steps):
        if len(results) >= MAX_BRANCHES:
            return
        eqs = [f for f in eqs if f != [sp.Integer(0)]]
        if not remaining:
            results.append(_back_substitute(steps))
            return
        if not eqs:
            return
        step = _choose(eqs, remaining)
        if step is None or step.score >= 3:
            # systems of quadratics: a joint solve usually gives far simpler roots
            sols = _fallback(eqs, remaining)
            if step is not None and not sols:
                sols = None
            for sol in sols or []:
                full = steps + [(p, sol[p]) for p in remaining]
                results.append(_back_substitute(full))
            if sols is not None:
                return
        rest = [eq for i, eq in enumerate(eqs) if i != step.eq_index]
        left = [p for p in remaining if p != step.unknown]
        for root in step.roots:
            new_eqs = []
            for factors in rest:
                prod = sp.Mul(*factors).xreplace({step.unknown: root})
                new_eqs.append(clean(prod, set(left)))
            rec(new_eqs, left, steps + [(step.unknown, root)])

    start = [clean(e, set(unknowns)) for e in equations]
    rec(start, unknowns, [])
    log.debug("solve_system: %d branch(es) for %s", len(results), unknowns)
    return results
