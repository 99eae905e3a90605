"""Constraint manifolds built from a seed manifold and a family of flows.

Given a finite-dimensional seed ``H`` (defining equations in the jets) and
flows ``Phi_1 .. Phi_h`` of characteristic fields, the constraint manifold
``K`` is the union of all images of ``H`` under the composite flow. This
module finds transversal equations, solves for the group parameters as
functions of the jets, builds a chart ``(x, y, alpha)`` of ``K`` and checks
tangency of evolutionary fields.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import sympy as sp

from ._solve import solve_system
from .charflow import CharField, FlowMap, compose_pullback
from .errors import (ChartIncomplete, DomainError, NoTransversalSet, ParameterSolveFailed,
                     SamplingFailure)
from .jetcalc import Generator, apply_evolution, bracket, fit_constant_combination, total_derivative
from .symexpr import JetSpace, _eval_terms, is_zero, sample_point, vector_function

log = logging.getLogger(__name__)


def _as_symbol_map(d: Mapping | None) -> dict:
    out = {}
    for k, v in (d or {}).items():
        out[sp.Symbol(k, real=True) if isinstance(k, str) else k] = v
    return out


def _leading_jet(space: JetSpace, e: sp.Expr) -> sp.Symbol:
    jets = space.jets_in(e)
    if not jets:
        raise ChartIncomplete(f"defining equation {e} contains no jets")
    return max(jets, key=lambda s: space.coord(s).order)


class Chart:
    """Coordinates ``x, free jets, parameters`` on an invariant submanifold.

    ``solved`` maps jets to expressions (which may mention further jets); jets
    of order at least ``top[k]`` in component ``k`` are produced by the
    restricted total derivative, except the top jet itself when ``top_expr``
    provides it directly.
    """

    def __init__(self, space: JetSpace, free: Sequence[sp.Symbol], params: Sequence[sp.Symbol],
                 solved: Mapping[sp.Symbol, sp.Expr], top: Mapping[int, sp.Symbol],
                 top_expr: Mapping[int, sp.Expr] | None = None):
        if space.m != 1:
            raise ChartIncomplete("charts are built for one independent variable")
        self.space = space
        self.free = list(free)
        self.params = list(params)
        self.solved = dict(solved)
        self.top = dict(top)
        self.top_expr = dict(top_expr or {})
        self._memo: dict = {}
        self._lock = threading.RLock()
        for k in range(space.n):
            if k not in self.top:
                raise ChartIncomplete(f"no defining equation constrains component {space.dep[k]}")

    @property
    def coords(self) -> list[sp.Symbol]:
        return [self.space.x()] + self.free + self.params

    def restrict_jet(self, c: sp.Symbol) -> sp.Expr:
        if c in self._memo:
            return self._memo[c]
        with self._lock:
            if c in self._memo:
                return self._memo[c]
            val = self._restrict_jet(c)
            self._memo[c] = val
            return val

    def _restrict_jet(self, c: sp.Symbol) -> sp.Expr:
        if c in self.free:
            return c
        if c in self.solved:
            return self.restrict(self.solved[c])
        info = self.space.coord(c)
        top = self.space.coord(self.top[info.index]).order
        if info.order == top and info.index in self.top_expr:
            return self.restrict(self.top_expr[info.index])
        if info.order >= top or (info.order > 0 and self.space.u(info.index, info.order - 1) in self.solved):
            prev = self.space.u(info.index, info.order - 1)
            return self.total_derivative(self.restrict_jet(prev))
        raise ChartIncomplete(f"jet {c} is neither a chart coordinate nor determined on the chart")

    def restrict(self, e: sp.Expr) -> sp.Expr:
        e = sp.sympify(e)
        jets = [s for s in e.free_symbols if self.space.is_jet(s) and s not in self.free]
        if not jets:
            return e
        return e.xreplace({c: self.restrict_jet(c) for c in jets})

    def total_derivative(self, e: sp.Expr) -> sp.Expr:
        """Restricted total derivative on chart expressions (parameters are constant)."""
        out = sp.diff(e, self.space.x())
        for y in self.free:
            if y in e.free_symbols:
                out += sp.diff(e, y) * self.restrict_jet(self.space.next_jet(y))
        return _tidy(out)

    def sample(self, rng: np.random.Generator, fixed: Mapping | None = None,
               extra: Sequence[sp.Symbol] = ()) -> dict:
        pt = dict(_as_symbol_map(fixed))
        syms = [s for s in self.coords + list(extra) if s not in pt]
        pt.update(sample_point(syms, rng))
        return pt


def _tidy(e: sp.Expr) -> sp.Expr:
    try:
        if e.has(sp.log, sp.sqrt, sp.Abs) or any(isinstance(a, sp.Pow) and not a.exp.is_Integer
                                                 for a in e.atoms(sp.Pow)):
            return sp.together(e)
        return sp.cancel(e)
    except (sp.PolynomialError, NotImplementedError):
        return e


class SeedManifold:
    """Finite-dimensional seed: one defining equation per dependent component."""

    def __init__(self, space: JetSpace, defs: Sequence[sp.Expr]):
        self.space = space
        self.defs = [sp.sympify(d) for d in defs]
        self.leads = [_leading_jet(space, d) for d in self.defs]
        comps = [space.coord(c).index for c in self.leads]
        if len(set(comps)) != len(comps):
            raise ChartIncomplete("each component needs exactly one seed equation")
        solved_top = {}
        for d, lead in zip(self.defs, self.leads):
            sols = solve_system([d], [lead])
            if not sols:
                raise ChartIncomplete(f"cannot solve seed equation {d} for {lead}")
            solved_top[space.coord(lead).index] = sols[0][lead]
        free = []
        for lead in self.leads:
            info = space.coord(lead)
            free += [space.u(info.index, j) for j in range(info.order)]
        self.chart = Chart(space, sorted(free, key=space.sort_key), [], {},
                           {space.coord(l).index: l for l in self.leads}, solved_top)

    @property
    def dim(self) -> int:
        return 1 + len(self.chart.free)


@dataclass
class TransversalSet:
    choice: list[tuple[int, int]]
    functions: list[sp.Expr]
    matrix: sp.Matrix
    counts: list[int]


def _rowspace_rank(M: np.ndarray) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > 1e-8 * max(1.0, s[0])))


def transversality(seed: SeedManifold, fields: Sequence[CharField], samples: int = 20,
                   rng: np.random.Generator | None = None, fixed: Mapping | None = None,
                   max_consequences: int | None = None) -> TransversalSet:
    """Greedy choice of consequences ``D^r f_j`` whose matrix ``Vbar_i(g)`` is nonsingular on H.

    Consequences of each seed equation are taken contiguously from r = 0. At
    each stage the lowest-order candidate raising the rank at most sample
    points is taken.
    """
    space = seed.space
    h = len(fields)
    rng = rng if rng is not None else np.random.default_rng(3)
    fixed = _as_symbol_map(fixed)
    max_consequences = h if max_consequences is None else max_consequences
    consts = set()
    for d in seed.defs:
        consts |= {s for s in d.free_symbols if space.coord(s).kind == "param"}
    for fld in fields:
        for c in fld.generator.components + fld.shifts:
            consts |= {s for s in sp.sympify(c).free_symbols if space.coord(s).kind == "param"}
    consts -= set(fixed)
    points = [seed.chart.sample(rng, fixed, sorted(consts, key=str)) for _ in range(samples)]

    def row(fn):
        exprs = [seed.chart.restrict(fld.apply(fn)) for fld in fields]
        vals = []
        for pt in points:
            try:
                vals.append([_eval_terms(e, pt)[0] for e in exprs])
            except DomainError:
                vals.append([np.nan] * h)
        return exprs, np.array(vals)

    counts = [0] * len(seed.defs)
    active = [True] * len(seed.defs)
    current = [sp.sympify(d) for d in seed.defs]
    chosen, funcs, rows_sym = [], [], []
    numeric = np.zeros((samples, 0, h))
    while len(chosen) < h:
        best = None
        for j, fn in enumerate(current):
            if not active[j]:
                continue
            exprs, vals = row(fn)
            trial = np.concatenate([numeric, vals[:, None, :]], axis=1)
            gains = [(_rowspace_rank(trial[p]) > _rowspace_rank(numeric[p]))
                     for p in range(samples) if np.all(np.isfinite(trial[p]))]
            if not gains or np.mean(gains) < 0.5:
                active[j] = False
                continue
            order = space.max_order(fn)
            if best is None or order < best[0]:
                best = (order, j, exprs, vals)
        if best is None:
            raise NoTransversalSet(
                f"only {len(chosen)} of {h} transversal equations found among seed consequences")
        _, j, exprs, vals = best
        chosen.append((j, counts[j]))
        funcs.append(current[j])
        rows_sym.append(exprs)
        numeric = np.concatenate([numeric, vals[:, None, :]], axis=1)
        counts[j] += 1
        current[j] = total_derivative(current[j], space)
        if counts[j] >= max_consequences:
            active[j] = False
    return TransversalSet(chosen, funcs, sp.Matrix(rows_sym), counts)


@dataclass
class ParameterMap:
    """The group parameters as functions of a jet point."""

    params: list[sp.Symbol]
    equations: list[sp.Expr]
    branches: list[dict]
    branch: int
    method: str
    constants: dict = field(default_factory=dict)

    def expr(self, p: sp.Symbol | int) -> sp.Expr:
        if self.method != "SYMBOLIC":
            raise ParameterSolveFailed("parameters are only available numerically")
        if isinstance(p, int):
            p = self.params[p]
        return self.branches[self.branch][p]

    @property
    def exprs(self) -> list[sp.Expr]:
        return [self.expr(p) for p in self.params]

    def evaluate(self, point: Mapping, guess: Sequence[float] | None = None) -> np.ndarray:
        point = _as_symbol_map(point)
        point = {**_as_symbol_map(self.constants), **point}
        if self.method == "SYMBOLIC":
            try:
                return np.array([_eval_terms(e, point)[0] for e in self.exprs])
            except DomainError as exc:
                raise ParameterSolveFailed(f"parameter formula undefined here: {exc}", point) from None
        return self._newton(point, guess)

    def _newton(self, point: dict, guess=None, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
        eqs = [e.xreplace({k: sp.Float(v) for k, v in point.items() if k in e.free_symbols})
               for e in self.equations]
        jac = [[sp.diff(e, p) for p in self.params] for e in eqs]
        f = vector_function(eqs, self.params)
        J = vector_function([c for r in jac for c in r], self.params)
        alpha = np.zeros(len(self.params)) if guess is None else np.array(guess, dtype=float)
        n = len(self.params)
        for _ in range(max_iter):
            with np.errstate(all="ignore"):
                r = np.array(f(*alpha))
                M = np.array(J(*alpha)).reshape(n, n)
            if not (np.all(np.isfinite(r)) and np.all(np.isfinite(M))):
                break
            try:
                step = np.linalg.solve(M, -r)
            except np.linalg.LinAlgError:
                break
            alpha = alpha + step
            if np.max(np.abs(step)) <= tol * (1 + np.max(np.abs(alpha))) and np.max(np.abs(r)) < 1e-8:
                return alpha
        raise ParameterSolveFailed("Newton iteration for the group parameters did not converge", point)


def _constants_in(space: JetSpace, exprs, exclude=()) -> list[sp.Symbol]:
    out = set()
    for e in exprs:
        out |= {s for s in sp.sympify(e).free_symbols if space.coord(s).kind == "param"}
    return sorted(out - set(exclude), key=str)


def _seed_points(seed: SeedManifold, rng, n, consts, fixed):
    """Jet points on the seed manifold (all jets up to the given symbols)."""
    return [seed.chart.sample(rng, fixed, consts) for _ in range(n)]


def _jets_at(chart: Chart, exprs: Sequence[sp.Expr], pt: dict) -> dict:
    """Values of all jets in ``exprs`` at a chart point."""
    out = dict(pt)
    for e in exprs:
        for s in e.free_symbols:
            if chart.space.is_jet(s) and s not in out:
                out[s] = _eval_terms(chart.restrict_jet(s), pt)[0]
    return out


def solve_parameters(flows: Sequence[FlowMap], functions: Sequence[sp.Expr], seed: SeedManifold,
                     samples: int = 12, rng: np.random.Generator | None = None,
                     fixed: Mapping | None = None, symbolic: bool = True) -> ParameterMap:
    """Solve ``composite_pullback_alpha(g_i) = 0`` for the parameters.

    Symbolic branches come from pattern elimination; the branch vanishing on
    the seed is selected. Without a symbolic solution (or with
    ``symbolic=False``) a Newton solve started at zero is used.
    """
    rng = rng if rng is not None else np.random.default_rng(5)
    params = [fm.param for fm in flows]
    eqs = [compose_pullback(flows, g) for g in functions]
    space = seed.space
    fixed = _as_symbol_map(fixed)
    branches = solve_system(eqs, params) if symbolic else []
    consts = _constants_in(space, eqs + seed.defs, set(params) | set(fixed))
    best, best_err = None, np.inf
    pts = _seed_points(seed, rng, samples, consts, fixed)
    for bi, br in enumerate(branches):
        if set(br) != set(params):
            continue
        errs = []
        for pt in pts:
            try:
                jp = _jets_at(seed.chart, list(br.values()), pt)
                errs.append(max(abs(_eval_terms(br[p], jp)[0]) for p in params))
            except DomainError:
                continue
        if len(errs) >= samples // 2 and max(errs) < best_err:
            best, best_err = bi, max(errs)
    if best is not None and best_err < 1e-7:
        return ParameterMap(params, eqs, branches, best, "SYMBOLIC", dict(fixed))
    log.info("no symbolic parameter branch through the seed; using Newton")
    return ParameterMap(params, eqs, [], 0, "NUMERIC", dict(fixed))


@dataclass
class KDef:
    """Defining equation ``raw(p, alpha)`` of K, with ``alpha = A(p)`` understood.

    ``raw`` is the composite pullback of a seed consequence; ``jet`` is the
    top jet it determines.
    """

    jet: sp.Symbol
    raw: sp.Expr
    _solved: sp.Expr | None = None

    def solved(self, pmap: "ParameterMap") -> sp.Expr:
        """Value of ``jet`` as a function of lower jets (parameters eliminated)."""
        if self._solved is None:
            sub = {p: pmap.expr(p) for p in pmap.params}
            self._solved = _solve_for(self.raw.xreplace(sub), self.jet)
        return self._solved

    def expr(self, pmap: "ParameterMap") -> sp.Expr:
        return self.jet - self.solved(pmap)


@dataclass
class ConstraintManifold:
    space: JetSpace
    seed: SeedManifold
    flows: list[FlowMap]
    transversal: TransversalSet
    parameters: ParameterMap
    chart: Chart
    kdefs: list[KDef]
    constants: dict
    _rates: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def dim(self) -> int:
        return len(self.chart.coords)

    def sample(self, rng: np.random.Generator, fixed: Mapping | None = None) -> dict:
        fixed = {**self.constants, **_as_symbol_map(fixed)}
        extra = sorted(self._free_constants() - set(fixed), key=str)
        return self.chart.sample(rng, fixed, extra)

    def _free_constants(self) -> set:
        return set(_constants_in(self.space, self.parameters.equations + self.seed.defs,
                                 self.chart.params))

    def implicit_pieces(self, V: "Generator | CharField", fns: Sequence[sp.Expr]):
        """Restricted ingredients of ``V(f(p, A(p)))`` for each ``f``.

        Returns ``(Vf, df, VE, dE)``: the field applied at fixed parameters,
        parameter gradients of ``f``, and the same two items for the
        parameter equations ``E``, all restricted to the chart.
        """
        apply = V.apply if hasattr(V, "apply") else (lambda e: apply_evolution(V, e))
        params = self.parameters.params
        E = self.parameters.equations
        R = self.chart.restrict
        VE = [R(apply(e)) for e in E]
        dE = [[R(sp.diff(e, p)) for p in params] for e in E]
        Vf = [R(apply(f)) for f in fns]
        df = [[R(sp.diff(f, p)) for p in params] for f in fns]
        return Vf, df, VE, dE

    def parameter_rates(self, V: "Generator | CharField", samples: int = 6,
                        tol: float = 1e-9) -> list[sp.Expr]:
        """``V(A_i)`` on K via implicit differentiation of ``E(p, A(p)) = 0``.

        The rates are expected to depend on the parameters only. They are
        first solved at a fixed rational fibre point, which keeps the linear
        solve small, and accepted when they agree with the full implicit
        formula at random chart points. Otherwise the general symbolic
        solution is returned unsimplified.
        """
        with self._lock:
            if V in self._rates:
                return self._rates[V][0]
        _, _, VE, dE = self.implicit_pieces(V, [])
        M = sp.Matrix(dE)
        rhs = sp.Matrix(VE)
        params = list(self.chart.params)
        lower = [self.space.x()] + list(self.chart.free)
        rates, decoupled = None, False
        for offset in range(3):
            anchor = {c: sp.Rational(7 + 3 * i + offset, 10) for i, c in enumerate(lower)}
            try:
                Ms = M.xreplace(anchor).applyfunc(_tidy)
                bs = (-rhs.xreplace(anchor)).applyfunc(_tidy)
                cand = _cramer(Ms, bs)
                if cand is None:
                    continue
            except (ZeroDivisionError, ValueError, sp.PolynomialError):
                continue
            if any(c.has(sp.zoo, sp.nan) for c in cand):
                continue
            if self._rates_agree(cand, VE, dE, samples, tol):
                rates, decoupled = [_radical_simplify(c) for c in cand], True
                break
        if rates is None:
            rates = list(M.LUsolve(-rhs))
        with self._lock:
            self._rates[V] = (rates, decoupled)
        return rates

    def rates_decoupled(self, V) -> bool:
        self.parameter_rates(V)
        return self._rates[V][1]

    def _rates_agree(self, cand, VE, dE, samples, tol) -> bool:
        h = len(cand)
        flat = list(cand) + list(VE) + [c for r in dE for c in r]
        coords = sorted(set().union(*[sp.sympify(e).free_symbols for e in flat]), key=str)
        fn = vector_function(flat, coords)
        rng = np.random.default_rng(31)
        done = attempts = 0
        while done < samples:
            attempts += 1
            if attempts > 200:
                return False
            pt = self.sample(rng)
            if any(c not in pt for c in coords):
                return False
            with np.errstate(all="ignore"):
                vals = np.array(fn(*[pt[c] for c in coords]), dtype=float)
            if not np.all(np.isfinite(vals)):
                continue
            guess, ve, de = vals[:h], vals[h:2 * h], vals[2 * h:].reshape(h, h)
            try:
                exact = np.linalg.solve(de, -ve)
            except np.linalg.LinAlgError:
                continue
            if np.max(np.abs(guess - exact)) > tol * (1 + np.max(np.abs(exact))):
                return False
            done += 1
        return True


def _radical_simplify(e: sp.Expr) -> sp.Expr:
    # anchor values leave nested square roots that cancel only under simplify
    if any(isinstance(a, sp.Pow) and not a.exp.is_Integer for a in e.atoms(sp.Pow)):
        try:
            s = sp.simplify(e)
        except (NotImplementedError, sp.PolynomialError):
            return e
        if sp.count_ops(s) < sp.count_ops(e):
            return s
    return e


def _cramer(M: sp.Matrix, b: sp.Matrix) -> list[sp.Expr] | None:
    """Solve a small linear system by determinants; the quotients cancel cheaply."""
    det = _tidy(M.det(method="berkowitz"))
    if det == 0:
        return None
    out = []
    for i in range(M.shape[1]):
        Mi = M.copy()
        Mi[:, i] = b
        out.append(_tidy(_tidy(Mi.det(method="berkowitz")) / det))
    return out


def _solve_for(e: sp.Expr, jet: sp.Symbol) -> sp.Expr:
    c1 = sp.diff(e, jet)
    if jet in c1.free_symbols:
        sols = solve_system([e], [jet])
        if not sols:
            raise ChartIncomplete(f"cannot solve {jet} from its defining equation")
        return sols[0][jet]
    return -e.xreplace({jet: 0}) / c1


def _regularize(e: sp.Expr, params: Sequence[sp.Symbol], rng) -> sp.Expr:
    """Remove a removable singularity at alpha = 0 by rationalising a radical numerator."""
    if not e.has(sp.sqrt) and not any(isinstance(a, sp.Pow) and a.exp.is_Rational and not a.exp.is_Integer
                                      for a in e.atoms(sp.Pow)):
        return e
    at0 = e.xreplace({p: 0 for p in params})
    if at0.has(sp.zoo, sp.nan) or at0 is sp.nan:
        try:
            alt = 1 / sp.cancel(sp.radsimp(1 / e))
        except (sp.PolynomialError, NotImplementedError, ZeroDivisionError):
            return e
        alt0 = alt.xreplace({p: 0 for p in params})
        if not alt0.has(sp.zoo, sp.nan) and is_zero(alt - e, rng=rng):
            return alt
    return e


def build_constraint(space: JetSpace, flows: Sequence[FlowMap], seed_defs: Sequence[sp.Expr],
                     extra_defs_order: int | None = None, constants: Mapping | None = None,
                     rng: np.random.Generator | None = None, symbolic: bool = True) -> ConstraintManifold:
    """Assemble the constraint manifold generated by ``flows`` from the seed.

    ``flows`` are listed in composition order: the composite pullback is
    ``flows[0]*(flows[1]*(...))``. ``extra_defs_order`` caps the jet order of
    the defining equations returned; by default one new equation per seed
    equation is produced beyond the transversal set. ``constants`` binds
    problem constants for all numerical checks.
    """
    rng = rng if rng is not None else np.random.default_rng(17)
    constants = _as_symbol_map(constants)
    flows = list(flows)
    seed = SeedManifold(space, seed_defs)
    tset = transversality(seed, [fm.char for fm in flows], rng=rng, fixed=constants)
    pmap = solve_parameters(flows, tset.functions, seed, rng=rng, fixed=constants, symbolic=symbolic)
    params = pmap.params

    # fibre coordinates, jets determined by the transversal equations, top jets
    free, determined, top = [], [], {}
    for j, (d, lead) in enumerate(zip(seed.defs, seed.leads)):
        info = space.coord(lead)
        free += [space.u(info.index, r) for r in range(info.order)]
        determined += [space.u(info.index, info.order + r) for r in range(tset.counts[j])]
        top[info.index] = space.u(info.index, info.order + tset.counts[j])

    # one more consequence per seed equation gives its defining equation on K
    raws = []
    for j, d in enumerate(seed.defs):
        fn = d
        for _ in range(tset.counts[j]):
            fn = total_derivative(fn, space)
        raws.append(compose_pullback(flows, fn))
    if extra_defs_order is not None:
        for j, d in enumerate(seed.defs):
            fn = d
            for _ in range(tset.counts[j] + 1):
                fn = total_derivative(fn, space)
            while space.max_order(fn) <= extra_defs_order:
                raws.append(compose_pullback(flows, fn))
                fn = total_derivative(fn, space)

    # solve the transversal equations for the determined jets
    eqs = pmap.equations
    cands = solve_system(eqs, determined) if determined else [{}]
    cands = [c for c in cands if set(c) == set(determined)]
    if not cands:
        raise ChartIncomplete("transversal equations cannot be solved for the chart")
    top_expr = {}
    for j, lead in enumerate(seed.leads):
        if tset.counts[j] == 0:
            info = space.coord(lead)
            top_expr[info.index] = _solve_for(raws[j], top[info.index])
    # a branch must reproduce the parameters and reduce to the seed as alpha -> 0
    best, best_key = None, None
    sample_rng = np.random.default_rng(23)
    extra = _constants_in(space, eqs + seed.defs, set(params) | set(constants))
    for cand in cands:
        chart = Chart(space, sorted(free, key=space.sort_key), params, cand, top, top_expr)
        if pmap.method != "SYMBOLIC":
            best = chart
            break
        errs, seed_errs = [], []
        for _ in range(10):
            pt = chart.sample(sample_rng, constants, extra)
            try:
                jp = _jets_at(chart, pmap.exprs, pt)
                vals = [_eval_terms(e, jp)[0] for e in pmap.exprs]
            except (DomainError, ChartIncomplete):
                continue
            errs.append(max(abs(v - pt[p]) for v, p in zip(vals, params)))
            near = dict(pt)
            near.update({p: 1e-4 * pt[p] for p in params})
            try:
                seed_errs.append(max(abs(_eval_terms(chart.restrict(d), near)[0]) for d in seed.defs))
            except DomainError:
                seed_errs.append(np.inf)
        if len(errs) < 5 or max(errs) > 1e-7:
            continue
        key = (max(seed_errs), max(errs))
        if best_key is None or key < best_key:
            best, best_key = chart, key
    if best is None:
        raise ChartIncomplete("no chart branch reproduces the parameters")
    solved = {k: _regularize(v, params, sample_rng) for k, v in best.solved.items()}
    chart = Chart(space, best.free, params, solved, top, top_expr)

    kdefs = [KDef(top[space.coord(lead).index], raw) for lead, raw in zip(seed.leads, raws)]
    for raw in raws[len(seed.leads):]:
        kdefs.append(KDef(_leading_jet(space, raw), raw))
    return ConstraintManifold(space, seed, flows, tset, pmap, chart, kdefs, constants)


@dataclass
class TangencyReport:
    ok: bool
    residuals: list[float]
    points: int

    def __bool__(self):
        return self.ok


def tangency_check(K: ConstraintManifold, V: Generator | CharField, points: int = 8,
                   tol: float = 1e-9, rng: np.random.Generator | None = None) -> TangencyReport:
    """Evaluate ``V(kdef)`` on K at random chart points.

    The parameters inside each defining equation are functions of the jets;
    their derivatives come from implicit differentiation of the parameter
    equations, so the symbolic parameter formulas are never expanded. The
    residual is scaled by the coefficient of the top jet.
    """
    rng = rng if rng is not None else np.random.default_rng(29)
    if not K.kdefs:
        raise ChartIncomplete("no defining equations available")
    fns = [kd.raw for kd in K.kdefs]
    Vf, df, VE, dE = K.implicit_pieces(V, fns)
    lead = [K.chart.restrict(sp.diff(kd.raw, kd.jet)) for kd in K.kdefs]
    h = len(K.parameters.params)
    flat = Vf + [c for r in df for c in r] + VE + [c for r in dE for c in r] + lead
    coords = sorted(set().union(*[e.free_symbols for e in flat]), key=str)
    fn = vector_function(flat, coords)
    nk = len(fns)
    worst = np.zeros(nk)
    done = attempts = 0
    while done < points:
        attempts += 1
        if attempts > 1000:
            raise SamplingFailure("no valid chart points for the tangency check")
        pt = K.sample(rng)
        missing = [c for c in coords if c not in pt]
        if missing:
            raise ChartIncomplete(f"tangency expression depends on {missing[0]}")
        with np.errstate(all="ignore"):
            vals = np.array(fn(*[pt[c] for c in coords]), dtype=float)
        if not np.all(np.isfinite(vals)):
            continue
        i = 0
        vf = vals[i:i + nk]; i += nk
        dfm = vals[i:i + nk * h].reshape(nk, h); i += nk * h
        ve = vals[i:i + h]; i += h
        dem = vals[i:i + h * h].reshape(h, h); i += h * h
        ld = vals[i:i + nk]
        try:
            rate = np.linalg.solve(dem, -ve)
        except np.linalg.LinAlgError:
            continue
        total = vf + dfm @ rate
        scale = np.maximum(np.abs(ld), 1e-300) + np.abs(vf) + np.abs(dfm @ rate)
        worst = np.maximum(worst, np.abs(total) / (1.0 + scale))
        done += 1
    return TangencyReport(bool(np.all(worst <= tol)), [float(w) for w in worst], points)


@dataclass
class PreconditionReport:
    ok: bool
    entries: list[dict]


def commutation_precondition(F: Generator, gens: Sequence[Generator], samples: int = 20,
                           tol: float = 1e-6, fixed: Mapping | None = None) -> PreconditionReport:
    """Check ``[G_i, F] = mu_i F + sum_k lambda_ik G_k`` with constant coefficients."""
    basis = [F] + list(gens)
    entries = []
    for i, G in enumerate(gens):
        H = bracket(G, F)
        fit = fit_constant_combination(H, basis, samples=samples, tol=tol, fixed=_as_symbol_map(fixed))
        entry = {"index": i, "bracket": H, "status": fit.status, "residual": fit.residual}
        if fit.coefficients is not None:
            entry["mu"] = float(fit.coefficients[0])
            entry["lambda"] = [float(c) for c in fit.coefficients[1:]]
        entries.append(entry)
    return PreconditionReport(all(e["status"] == "OK" for e in entries), entries)
