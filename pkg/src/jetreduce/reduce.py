"""Reduced ODE systems on a constraint manifold and solution reconstruction.

On the chart ``(x, y, alpha)`` of K the evolution fields and the total
derivative read

    V_{F_k} = sum_j phi_k^j d/dy^j + sum_l psi_k^l d/dalpha^l
    D_x     = d/dx + sum_j phit^j d/dy^j

so a solution of ``u_t = sum_k c_k(t) F_k`` lying on K is obtained by
integrating the ``t`` system at the anchor ``x0`` and then the ``x`` system
from ``x0`` across the grid for every time slice.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

import numpy as np
import sympy as sp

from .constraint import ConstraintManifold, _tidy
from .errors import (BreakingDetected, ChartIncomplete, ConfigError, DomainExit, NumericalBlowup)
from .jetcalc import Generator, apply_evolution
from .symexpr import JetSpace, is_zero, parse_expr, vector_function

if TYPE_CHECKING:
    from .problems import Problem

log = logging.getLogger(__name__)

BLOWUP = 1e12
T = sp.Symbol("t", real=True)


# --------------------------------------------------------------------------
# coefficients


class CoefficientSet:
    """Named scalar functions of t.

    Each entry is a number, an expression in ``t`` (text or sympy), or a table
    ``{"t": [...], "values": [...]}`` interpolated linearly.
    """

    def __init__(self, names: Sequence[str], specs: Mapping[str, object]):
        self.names = list(names)
        unknown = set(specs) - set(self.names)
        if unknown:
            raise ConfigError(f"unknown coefficient(s): {sorted(unknown)}")
        self._funcs: dict[str, Callable] = {}
        self._exprs: dict[str, sp.Expr] = {}
        self._tables: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for name in self.names:
            spec = specs.get(name, 0)
            if isinstance(spec, Mapping):
                ts = np.asarray(spec["t"], dtype=float)
                vs = np.asarray(spec["values"], dtype=float)
                if ts.ndim != 1 or ts.shape != vs.shape or ts.size < 2 or np.any(np.diff(ts) <= 0):
                    raise ConfigError(f"coefficient {name}: table needs increasing t and matching values")
                self._tables[name] = (ts, vs)
                self._funcs[name] = lambda t, ts=ts, vs=vs: np.interp(t, ts, vs)
                continue
            if isinstance(spec, str):
                expr = parse_expr(spec, JetSpace(("x",), ("u",)))
            else:
                expr = sp.sympify(spec)
            extra = expr.free_symbols - {T}
            if extra:
                raise ConfigError(f"coefficient {name} depends on {sorted(map(str, extra))}, only t allowed")
            self._exprs[name] = expr
            f = sp.lambdify([T], expr, modules="numpy")
            self._funcs[name] = lambda t, f=f: np.broadcast_to(np.asarray(f(t), dtype=float),
                                                               np.shape(t)).copy()

    @property
    def symbols(self) -> list[sp.Symbol]:
        return [sp.Symbol(n, real=True) for n in self.names]

    def value(self, name: str, t):
        return self._funcs[name](np.asarray(t, dtype=float))

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.array([self._funcs[n](t) for n in self.names])

    def is_constant(self, name: str) -> bool:
        if name in self._tables:
            return bool(np.all(self._tables[name][1] == self._tables[name][1][0]))
        return self._exprs[name].is_number

    def constant(self, name: str) -> float:
        if not self.is_constant(name):
            raise ConfigError(f"coefficient {name} is required to be constant")
        return float(self.value(name, 0.0))

    def check_interval(self, t0: float, t1: float):
        lo, hi = min(t0, t1), max(t0, t1)
        for name, (ts, _) in self._tables.items():
            if ts[0] > lo + 1e-14 or ts[-1] < hi - 1e-14:
                raise ConfigError(f"coefficient table {name} does not cover [{lo}, {hi}]")

    def describe(self) -> dict:
        out = {}
        for n in self.names:
            if n in self._tables:
                out[n] = {"t": self._tables[n][0].tolist(), "values": self._tables[n][1].tolist()}
            else:
                out[n] = str(self._exprs[n])
        return out


# --------------------------------------------------------------------------
# solution fields


@dataclass
class SolutionField:
    t_grid: np.ndarray
    x_grid: np.ndarray
    values: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        self.x_grid = np.asarray(self.x_grid, dtype=float)
        shape = (self.t_grid.size, self.x_grid.size)
        for k, v in list(self.values.items()):
            v = np.asarray(v, dtype=float)
            if v.shape != shape:
                raise ValueError(f"field {k} has shape {v.shape}, grid is {shape}")
            self.values[k] = v

    @property
    def components(self) -> list[str]:
        return list(self.values)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def to_csv(self, path) -> None:
        names = self.components
        with open(path, "w", newline="") as fh:
            fh.write(",".join(["t", "x"] + names) + "\n")
            for i, t in enumerate(self.t_grid):
                for j, x in enumerate(self.x_grid):
                    row = [t, x] + [self.values[n][i, j] for n in names]
                    fh.write(",".join("%.17g" % v for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, meta: dict | None = None) -> "SolutionField":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = np.array([[float(v) for v in r] for r in reader if r])
        if header[:2] != ["t", "x"] or len(header) < 3:
            raise ConfigError("field CSV needs a header t,x,<components>")
        ts = np.unique(rows[:, 0])
        xs = np.unique(rows[:, 1])
        if rows.shape[0] != ts.size * xs.size:
            raise ConfigError("field CSV is not a full tensor grid")
        order = np.lexsort((rows[:, 1], rows[:, 0]))
        rows = rows[order]
        values = {name: rows[:, 2 + k].reshape(ts.size, xs.size) for k, name in enumerate(header[2:])}
        return cls(ts, xs, values, dict(meta or {}))


# --------------------------------------------------------------------------
# reduced system


def _same_factor(g: sp.Expr, b: sp.Expr) -> bool:
    g = g.args[0] if isinstance(g, sp.Abs) else g
    return sp.expand(g - b) == 0 or sp.expand(g + b) == 0


def _denominator_factors(exprs, coords) -> list[sp.Expr]:
    out = []
    for e in exprs:
        den = sp.denom(sp.together(e))
        if den.is_number:
            continue
        for f in sp.Mul.make_args(sp.factor_terms(den)):
            base = f.base if isinstance(f, sp.Pow) and f.exp.is_Rational else f
            if isinstance(base, sp.exp) or base.is_number or not (base.free_symbols & set(coords)):
                continue
            if not any(sp.expand(base - g) == 0 for g in out):
                out.append(base)
    return out


@dataclass
class ReducedSystem:
    """The t and x right-hand sides on the chart, plus their numerical evaluators.

    ``phi[k][j]`` and ``psi[k][l]`` are the components of ``V_{F_k}`` along the
    fibre coordinate ``y^j`` and parameter ``alpha^l``; the time derivative of a
    chart coordinate is ``sum_k c_k(t) * (component)``. ``x_rhs[j]`` is the
    restricted ``D_x`` component along ``y^j``.
    """

    K: ConstraintManifold
    coeff_names: list[str]
    fields: list[Generator]
    phi: list[list[sp.Expr]]
    psi: list[list[sp.Expr]]
    x_rhs: list[sp.Expr]
    outputs: list[sp.Expr]
    guards: list[sp.Expr]
    branch_factors: list[sp.Expr]
    anchor: float = 0.0
    psi_decoupled: list[bool] = field(default_factory=list)
    _num: dict = field(default_factory=dict, repr=False)

    @property
    def chart(self):
        return self.K.chart

    @property
    def fibre(self) -> list[sp.Symbol]:
        return list(self.chart.free)

    @property
    def params(self) -> list[sp.Symbol]:
        return list(self.chart.params)

    @property
    def state(self) -> list[sp.Symbol]:
        return self.fibre + self.params

    @property
    def state_names(self) -> list[str]:
        return [s.name for s in self.state]

    @property
    def constants(self) -> dict:
        return dict(self.K.constants)

    @property
    def coeff_symbols(self) -> list[sp.Symbol]:
        return [sp.Symbol(n, real=True) for n in self.coeff_names]

    # symbolic views -------------------------------------------------------

    def t_rhs(self) -> dict:
        """``d/dt`` of every state coordinate as an expression in the coefficient symbols."""
        cs = self.coeff_symbols
        out = {}
        for j, y in enumerate(self.fibre):
            out[y] = sum(c * self.phi[k][j] for k, c in enumerate(cs))
        for l, a in enumerate(self.params):
            out[a] = sum(c * self.psi[k][l] for k, c in enumerate(cs))
        return out

    def rate_of(self, expr: sp.Expr, k: int | None = None) -> sp.Expr:
        """Push a chart function forward along the t flow (or along ``V_{F_k}`` only)."""
        expr = self.chart.restrict(sp.sympify(expr))
        comps = range(len(self.fields)) if k is None else [k]
        cs = self.coeff_symbols
        total = sp.Integer(0)
        for kk in comps:
            part = sum(sp.diff(expr, y) * self.phi[kk][j] for j, y in enumerate(self.fibre))
            part += sum(sp.diff(expr, a) * self.psi[kk][l] for l, a in enumerate(self.params))
            total += (cs[kk] if k is None else 1) * part
        return total

    def x_rate_of(self, expr: sp.Expr) -> sp.Expr:
        expr = self.chart.restrict(sp.sympify(expr))
        out = sp.diff(expr, self.chart.space.x())
        return out + sum(sp.diff(expr, y) * r for y, r in zip(self.fibre, self.x_rhs))

    def commutator(self, k: int) -> list[sp.Expr]:
        """Components of ``[V_{F_k}|K, D_x|K]`` along the fibre (zero for a flat connection)."""
        out = []
        for j in range(len(self.fibre)):
            out.append(self.rate_of(self.x_rhs[j], k) - self.x_rate_of(self.phi[k][j]))
        return out

    def is_flat(self, trials: int = 8, tol: float = 1e-8) -> bool:
        return all(is_zero(c, trials=trials, tol=tol, fixed=self.constants)
                   for k in range(len(self.fields)) for c in self.commutator(k))

    def direct_parameter_rates(self, k: int) -> list[sp.Expr]:
        """``V_{F_k}(A_l(p))`` restricted to K, from the explicit parameter formulas."""
        pmap = self.K.parameters
        F = self.fields[k]
        return [self.chart.restrict(apply_evolution(F, pmap.expr(p))) for p in pmap.params]

    # numerics ---------------------------------------------------------------

    def _compile(self):
        if self._num:
            return self._num
        x = self.chart.space.x()
        args = [x] + self.state
        consts = {k: sp.Float(v) for k, v in self.constants.items()}

        def fn(exprs):
            exprs = [sp.sympify(e).xreplace(consts) for e in exprs]
            extra = set().union(*[e.free_symbols for e in exprs]) - set(args) if exprs else set()
            if extra:
                raise ChartIncomplete(f"reduced system depends on unbound symbols {sorted(map(str, extra))}")
            return vector_function(exprs, args) if exprs else None

        self._num["t"] = [fn(list(self.phi[k]) + list(self.psi[k])) for k in range(len(self.fields))]
        self._num["x"] = fn(self.x_rhs)
        self._num["out"] = fn(self.outputs)
        self._num["guards"] = fn(self.guards)
        self._num["branch"] = fn(self.branch_factors)
        return self._num

    def t_rhs_numeric(self, x, z: np.ndarray, cvals: np.ndarray) -> np.ndarray:
        """Time derivative of the state ``z`` (shape ``(nstate, ...)``) for coefficient values."""
        num = self._compile()
        out = np.zeros_like(z, dtype=float)
        for k, f in enumerate(num["t"]):
            if f is None:
                continue
            ck = cvals[k]
            if np.all(ck == 0):
                continue
            comps = np.array(f(x, *z))
            out = out + ck * comps
        return out

    def x_rhs_numeric(self, x, z: np.ndarray) -> np.ndarray:
        f = self._compile()["x"]
        if f is None:
            return np.zeros((0,) + np.shape(z)[1:])
        return np.array(f(x, *z))

    def output_values(self, x, z: np.ndarray) -> np.ndarray:
        return np.array(self._compile()["out"](x, *z))


def _default_generators(problem: "Problem") -> tuple[list[str], list[Generator]]:
    return problem.coeff_names, problem.all_generators()


def reduced_system(problem: "Problem", K: ConstraintManifold | None = None,
                   check_decoupling: bool = True) -> ReducedSystem:
    """Restrict every evolution field of the problem and ``D_x`` to the chart of K."""
    K = K if K is not None else problem.constraint()
    chart = K.chart
    space = chart.space
    names, gens = _default_generators(problem)
    fibre = list(chart.free)
    phi, psi = [], []
    for G in gens:
        row = []
        for y in fibre:
            info = space.coord(y)
            row.append(_tidy(chart.restrict(G.prolonged(info.index, info.sigma))))
        phi.append(row)
        psi.append(K.parameter_rates(G))
    x_rhs = [chart.restrict_jet(space.next_jet(y)) for y in fibre]
    outputs = [chart.restrict_jet(space.u(k, 0)) for k in range(space.n)]
    coords = [space.x()] + fibre + list(chart.params)
    # K is singular where the denominators of its defining equations vanish
    kdef_dens = []
    for kd in problem.expected_kdefs:
        den = sp.denom(sp.together(problem.parse(kd)))
        if not den.is_number:
            kdef_dens.append(1 / chart.restrict(den))
    branch = [problem.parse(b) for b in problem.branch_factors]
    guards = [g for g in _denominator_factors(x_rhs + outputs + kdef_dens, coords)
              if not any(_same_factor(g, b) for b in branch)]
    rs = ReducedSystem(K, list(names), list(gens), phi, psi, x_rhs, outputs, guards, branch,
                       float(problem.anchor))
    if check_decoupling:
        rs.psi_decoupled = [K.rates_decoupled(G) for G in gens]
    return rs


# --------------------------------------------------------------------------
# time integration


@dataclass
class Trajectory:
    t: np.ndarray
    values: np.ndarray
    names: list[str]
    error_estimate: np.ndarray
    steps: int

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]

    def final(self) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.values[:, -1])}


def _rk4_path(rhs, z0: np.ndarray, t0: float, t1: float, steps: int) -> np.ndarray:
    h = (t1 - t0) / steps
    z = np.array(z0, dtype=float)
    out = np.empty((z.size, steps + 1))
    out[:, 0] = z
    for n in range(steps):
        t = t0 + n * h
        k1 = rhs(t, z)
        k2 = rhs(t + h / 2, z + h / 2 * k1)
        k3 = rhs(t + h / 2, z + h / 2 * k2)
        k4 = rhs(t + h, z + h * k3)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > BLOWUP:
            raise NumericalBlowup(t + h)
        out[:, n + 1] = z
    return out


def _init_vector(names: Sequence[str], init: Mapping) -> np.ndarray:
    init = {str(k): v for k, v in init.items()}
    missing = [n for n in names if n not in init]
    if missing:
        raise ConfigError(f"initial data missing for {missing}")
    return np.array([float(init[n]) for n in names])


def integrate_reduced(sys: ReducedSystem, init: Mapping, coeffs: CoefficientSet, t0: float,
                      t1: float, steps: int, params_path: Callable | None = None,
                      only_params: bool = False) -> Trajectory:
    """Fixed-step RK4 for the state at the anchor, with a step-halving error estimate.

    The returned values come from the halved-step run; ``error_estimate`` is
    the Richardson estimate ``|z_h - z_{h/2}| / 15`` per coordinate.
    ``only_params`` integrates the parameter equations alone; ``params_path``
    injects a known parameter path ``t -> alpha(t)`` and integrates the fibre
    coordinates only.
    """
    if steps < 16:
        raise ConfigError("integrate_reduced needs at least 16 steps")
    coeffs.check_interval(t0, t1)
    x0 = sys.anchor
    nf, npar = len(sys.fibre), len(sys.params)
    if only_params:
        names = [p.name for p in sys.params]
    elif params_path is not None:
        names = [y.name for y in sys.fibre]
    else:
        names = sys.state_names
    z0 = _init_vector(names, init)

    def rhs(t, z):
        c = coeffs(t)
        if only_params:
            full = np.concatenate([np.zeros(nf), z])
            return sys.t_rhs_numeric(x0, full, c)[nf:]
        if params_path is not None:
            full = np.concatenate([z, np.asarray(params_path(t), dtype=float)])
            return sys.t_rhs_numeric(x0, full, c)[:nf]
        return sys.t_rhs_numeric(x0, z, c)

    if only_params and npar and any(not ok for ok in sys.psi_decoupled):
        log.warning("parameter equations are not decoupled from the fibre; only_params uses y = 0")
    coarse = _rk4_path(rhs, z0, t0, t1, steps)
    fine = _rk4_path(rhs, z0, t0, t1, 2 * steps)[:, ::2]
    err = np.max(np.abs(fine - coarse), axis=1) / 15.0
    ts = np.linspace(t0, t1, steps + 1)
    return Trajectory(ts, fine, names, err, steps)


# --------------------------------------------------------------------------
# reconstruction in x


def _rk4_x(sys: ReducedSystem, x_from: float, x_to: float, z: np.ndarray, max_step: float) -> np.ndarray:
    nf = len(sys.fibre)
    if nf == 0 or x_to == x_from:
        return z
    n = max(1, int(math.ceil(abs(x_to - x_from) / max_step - 1e-9)))
    h = (x_to - x_from) / n
    par = z[nf:]

    def f(x, y):
        return sys.x_rhs_numeric(x, np.concatenate([y, par]))

    y = z[:nf]
    x = x_from
    for _ in range(n):
        k1 = f(x, y)
        k2 = f(x + h / 2, y + h / 2 * k1)
        k3 = f(x + h / 2, y + h / 2 * k2)
        k4 = f(x + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        x += h
    return np.concatenate([y, par])


def reconstruct(sys: ReducedSystem, traj: Trajectory, x_grid, max_step: float = 1e-3,
                label: str = "") -> SolutionField:
    """Integrate ``D_x`` from the anchor for every time slice and map to u-values.

    All time slices are advanced together as numpy arrays; within a slice the
    x integration is sequential and starts at the anchor.
    """
    if traj.names != sys.state_names:
        raise ConfigError("trajectory does not cover the full chart state")
    xs = np.asarray(x_grid, dtype=float)
    if np.any(np.diff(xs) <= 0):
        raise ConfigError("x grid must be increasing")
    x0 = sys.anchor
    nt = traj.t.size
    nstate = len(sys.state)
    states = np.empty((nstate, nt, xs.size))
    right = np.where(xs >= x0)[0]
    left = np.where(xs < x0)[0][::-1]
    for idx in (right, left):
        z = traj.values.copy()
        xc = x0
        for j in idx:
            z = _rk4_x(sys, xc, xs[j], z, max_step)
            xc = xs[j]
            states[:, :, j] = z
    X = np.broadcast_to(xs, (nt, xs.size))
    with np.errstate(all="ignore"):
        out = sys.output_values(X, states)
    _check_domain(sys, X, states, out, traj.t, xs)
    space = sys.chart.space
    values = {space.dep[k]: out[k] for k in range(space.n)}
    meta = {"label": label, "anchor": x0, "state_names": sys.state_names,
            "branch_points": _branch_points(sys, X, states, traj.t, xs)}
    field_ = SolutionField(traj.t, xs, values, meta)
    field_.meta["states"] = states
    return field_


def _check_domain(sys, X, states, out, ts, xs):
    bad = ~np.all(np.isfinite(out), axis=0) | ~np.all(np.isfinite(states), axis=0)
    num = sys._compile()
    if num["guards"] is not None:
        with np.errstate(all="ignore"):
            g = np.array(num["guards"](X, *states))
        bad |= ~np.all(np.isfinite(g), axis=0)
        flips = np.any(g[:, :, 1:] * g[:, :, :-1] < 0, axis=0)
        bad[:, 1:] |= flips
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise DomainExit(float(xs[j]), float(ts[i]))
    if np.max(np.abs(out)) > BLOWUP:
        i, j = np.argwhere(np.abs(out).max(axis=0) > BLOWUP)[0]
        raise NumericalBlowup(float(ts[i]), f"reconstructed field exceeds {BLOWUP:g} at x={xs[j]:.6g}")


def _branch_points(sys, X, states, ts, xs) -> list:
    f = sys._compile()["branch"]
    if f is None:
        return []
    vals = np.array(f(X, *states))
    out = []
    for i in range(ts.size):
        flips = np.where(np.any(vals[:, i, 1:] * vals[:, i, :-1] < 0, axis=0))[0]
        out.append([float(0.5 * (xs[j] + xs[j + 1])) for j in flips])
    return out


# --------------------------------------------------------------------------
# implicit transport solutions


def implicit_solution_eval(H: sp.Expr | str, A, B, x_grid, t_grid, tol: float = 1e-12,
                           max_iter: int = 50, min_slope: float = 1e-8) -> SolutionField:
    """Solve ``U - exp(-B) H(x - A exp(B) U) = 0`` pointwise by Newton's method.

    Each slice is started from the solution of the previous slice (the seed
    ``H`` itself during the first one). A Newton failure, or a slope
    ``dG/dU`` that stops being positive, marks the loss of the solution
    branch and raises BreakingDetected at the first failing grid point.
    """
    xsym = sp.Symbol("x", real=True)
    if isinstance(H, str):
        H = parse_expr(H, JetSpace(("x",), ("u",)))
    H = sp.sympify(H)
    if H.free_symbols - {xsym}:
        raise ConfigError("H must be a function of x only")
    h = sp.lambdify([xsym], H, modules="numpy")
    dh = sp.lambdify([xsym], sp.diff(H, xsym), modules="numpy")
    xs = np.asarray(x_grid, dtype=float)
    ts = np.asarray(t_grid, dtype=float)
    A = np.asarray(A, dtype=float) * np.ones_like(ts)
    B = np.asarray(B, dtype=float) * np.ones_like(ts)
    U = np.empty((ts.size, xs.size))
    guess = np.broadcast_to(np.asarray(h(xs), dtype=float), xs.shape) * np.exp(-B[0])
    for i in range(ts.size):
        a, eb = A[i], math.exp(B[i])
        u = guess.copy()
        done = np.zeros(xs.size, dtype=bool)
        with np.errstate(all="ignore"):
            for _ in range(max_iter):
                xi = xs - a * eb * u
                G = u - np.asarray(h(xi), dtype=float) / eb
                dG = 1.0 + a * np.asarray(dh(xi), dtype=float)
                step = G / dG
                u = u - step
                done = np.abs(step) <= tol * (1 + np.abs(u))
                if np.all(done | ~np.isfinite(u)):
                    break
            xi = xs - a * eb * u
            slope = 1.0 + a * np.asarray(dh(xi), dtype=float)
        fail = ~done | ~np.isfinite(u) | (slope <= min_slope)
        if np.any(fail):
            j = int(np.argmax(fail))
            partial = SolutionField(ts[:i], xs, {"u": U[:i]}, {"breaking": True})
            raise BreakingDetected(float(xs[j]), float(ts[i]), partial)
        U[i] = u
        guess = u
    return SolutionField(ts, xs, {"u": U}, {"method": "implicit"})
