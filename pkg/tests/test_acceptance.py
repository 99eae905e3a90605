"""Acceptance criteria 1-9 at their stated tolerances.

Each test prints one ``[criterion N] PASS|FAIL ...`` line (also under output
capture) before asserting.
"""

import time

import numpy as np
import pytest
import sympy as sp
from scipy.interpolate import CubicSpline

from jetreduce.charflow import numeric_flow
from jetreduce.errors import BreakingDetected
from jetreduce.jetcalc import Generator, closure_report, total_derivative
from jetreduce.oracle import fd_residual, mol_reference
from jetreduce.problems import builtin, expected_solution
from jetreduce.reduce import implicit_solution_eval, integrate_reduced, reconstruct, reduced_system
from jetreduce.symexpr import JetSpace, is_zero, parse_expr, vector_function

LABELS = ["transport", "heat", "twocomp", "kdv"]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def rel_linf(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def fresh(label):
    # copy without the shared construction cache so timings include the build
    return builtin(label).with_constants()


def run_reduced(p, coeffs, nx, nt, x_range=None, t_range=None, max_step=1e-3, init=None):
    g = p.defaults["grid"]
    x_range = x_range or g["x"][:2]
    t_range = t_range or g["t"][:2]
    rs = reduced_system(p)
    c = p.coefficients(coeffs)
    init = {**p.defaults["init"], **(init or {})}
    xs = np.linspace(*x_range, nx)
    ts = np.linspace(*t_range, nt)
    tr = integrate_reduced(rs, init, c, ts[0], ts[-1], nt - 1)
    return reconstruct(rs, tr, xs, max_step=max_step), c, init, xs, ts


# 1 ---------------------------------------------------------------------------

def test_criterion_1_constraint_regression(report):
    details, ok = [], True
    for label in LABELS:
        t0 = time.perf_counter()
        p = fresh(label)
        K = p.constraint()
        pm = K.parameters
        R = K.chart.restrict
        good = pm.method == "SYMBOLIC" and all(
            is_zero(R(p.parse(e)), fixed=K.constants) for e in p.expected_kdefs)
        dt = time.perf_counter() - t0
        good = good and dt < 10.0
        ok &= good
        details.append(f"{label}:{'ok' if good else 'bad'}({dt:.1f}s)")
    report(1, ok, " ".join(details))


# 2 ---------------------------------------------------------------------------

def test_criterion_2_tangency(report):
    from jetreduce.constraint import tangency_check

    t0 = time.perf_counter()
    worst, ok = {}, True
    for label in LABELS:
        p = fresh(label)
        K = p.constraint()
        for name, V in zip(p.coeff_names, p.all_generators()):
            tr = tangency_check(K, V, points=8, tol=1e-9, rng=np.random.default_rng(3))
            ok &= tr.ok
            worst[f"{label}.{name}"] = max(tr.residuals)
    dt = time.perf_counter() - t0
    ok = ok and dt < 30.0
    report(2, ok, f"max residual {max(worst.values()):.2e}, {dt:.1f}s total")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_reduced_system_regression(report):
    bad = []
    count = 0
    for label in LABELS:
        p = builtin(label)
        rs = reduced_system(p)
        fixed = rs.constants
        for k, v in p.expected_t_rates.items():
            count += 1
            if not is_zero(rs.rate_of(p.parse(k)) - rs.chart.restrict(p.parse(v)), fixed=fixed):
                bad.append(f"{label}:d_t {k}")
        for k, v in p.expected_x_rates.items():
            count += 1
            if not is_zero(rs.x_rate_of(p.parse(k)) - rs.chart.restrict(p.parse(v)), fixed=fixed):
                bad.append(f"{label}:d_x {k}")
    report(3, not bad, f"{count - len(bad)}/{count} right-hand sides match {bad or ''}")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_heat_end_to_end(report):
    t0 = time.perf_counter()
    p = builtin("heat")
    coeffs = {"c0": 1, "c1": 0.3, "c2": 0.3}
    fields = []
    for n in (101, 201, 401):
        fld, c, init, xs, ts = run_reduced(p, coeffs, n, n, (-1, 1), (0, 0.1))
        fields.append(fld)
        if n == 101:
            err = rel_linf(fld["u"], expected_solution("heat", xs, ts, c, init)["u"])
    rep = fd_residual(fields[0], p, c, refined=fields[1:])
    dt = time.perf_counter() - t0
    orders = [o for o in rep.orders if o is not None]
    ok = err <= 1e-6 and len(orders) == 2 and all(abs(o - 2) <= 0.3 for o in orders) and dt < 20
    report(4, ok, f"rel-Linf {err:.2e}, fd orders {[round(o, 3) for o in orders]}, {dt:.1f}s")


# 5 ---------------------------------------------------------------------------

def test_criterion_5_kdv_end_to_end(report):
    p = builtin("kdv")
    fld, c, init, xs, ts = run_reduced(p, {"c1": 0, "c2": 0}, 201, 101, (-10, 10), (0, 1))
    beta0 = p.constants["beta0"]
    # translating soliton with speed beta0 for u_t = u_xxx + u u_x
    soliton = 3 * beta0 / np.cosh(np.sqrt(beta0) / 2 * (xs[None, :] + beta0 * ts[:, None])) ** 2
    e_free = rel_linf(fld["u"], soliton)
    fld, c, init, xs, ts = run_reduced(p, {"c1": 0.1, "c2": 0}, 201, 101, (-10, 10), (0, 1))
    e_forced = rel_linf(fld["u"], expected_solution("kdv", xs, ts, c, init)["u"])
    ok = e_free <= 1e-5 and e_forced <= 1e-4
    report(5, ok, f"unforced rel-Linf {e_free:.2e}, forced c1=0.1 rel-Linf {e_forced:.2e}")


# 6 ---------------------------------------------------------------------------

def test_criterion_6_cross_solver(report):
    p = builtin("heat")
    fld, c, init, xs, ts = run_reduced(p, None, 401, 51, (-1, 1), (0, 0.05))
    tb = np.linspace(0, 0.05, 2001)
    edge = reconstruct(reduced_system(p),
                       integrate_reduced(reduced_system(p), init, c, 0, 0.05, 2000),
                       np.array([-1.0, 0.0, 1.0]))["u"][:, [0, 2]]
    spline = CubicSpline(tb, edge)
    m = mol_reference(p, fld["u"][0], c, xs, [0, 0.05], boundary=lambda t, xe: spline(t))
    e_heat = rel_l2(m["u"][-1], fld["u"][-1])

    p = builtin("kdv")
    fld, c, init, _, ts = run_reduced(p, {"c1": 0, "c2": 0}, 801, 51, (-20, 20), (0, 0.5))
    # periodic reference on one period of the same grid (endpoint dropped)
    xs = fld.x_grid[:-1]
    u0 = fld["u"][0, :-1]
    m = mol_reference(p, u0, c, xs, [0, 0.5])
    dx = xs[1] - xs[0]
    e_kdv = rel_l2(m["u"][-1], fld["u"][-1, :-1])
    ok = e_heat <= 1e-3 and e_kdv <= 1e-2 and m.meta["dt_max"] <= 0.2 * dx ** 3
    report(6, ok, f"heat rel-L2 {e_heat:.2e} at t=0.05, KdV rel-L2 {e_kdv:.2e} at t=0.5 "
                  f"(dt {m.meta['dt_max']:.2e} <= {0.2 * dx ** 3:.2e})")


# 7 ---------------------------------------------------------------------------

def _monomial_basis(space, order):
    x = space.x()
    jets = [space.u(k, s) for k in range(space.n) for s in range(order + 1)]
    basis = [sp.Integer(1), x, x ** 2] + jets + [x * j for j in jets]
    basis += [a * b for i, a in enumerate(jets) for b in jets[i:]]
    return basis


def test_criterion_7_flow_identities(report):
    rng = np.random.default_rng(2024)
    worst_id = worst_group = 0.0
    nflows = 0
    for label in LABELS:
        p = builtin(label)
        space = p.space
        for fm in p.flow_maps():
            nflows += 1
            a = fm.param
            B = fm.jacobian().inverse[0, 0]
            basis = _monomial_basis(space, 2)
            lhs = [fm.pullback(total_derivative(f, space)) for f in basis]
            rhs = [B * total_derivative(fm.pullback(f), space) for f in basis]
            syms = sorted(set().union(*[e.free_symbols for e in lhs + rhs]) - {a}, key=str)
            consts = {s: v for s, v in p.constant_symbols.items() if s in syms}
            coords = [s for s in syms if s not in consts]
            fn = vector_function(lhs + rhs, [a] + coords + list(consts))
            for _ in range(50):
                w = rng.normal(size=len(basis))
                av = rng.uniform(-0.2, 0.2)
                pt = rng.uniform(0.2, 1.7, size=len(coords))
                vals = np.array(fn(av, *pt, *consts.values()), dtype=float)
                left, right = vals[:len(basis)] @ w, vals[len(basis):] @ w
                worst_id = max(worst_id, abs(left - right))

            # group law, closed form against the numerical flow
            targets = [space.x()] + [space.u(k, s) for k in range(space.n) for s in range(3)]
            for _ in range(10):
                av, bv = rng.uniform(-0.2, 0.2, size=2)
                start = {c: float(rng.uniform(0.2, 1.7)) for c in
                         [space.x()] + space.jets_up_to(10)}
                one = numeric_flow(fm.char, start, av, 2, constants=p.constants)
                two = numeric_flow(fm.char, {**start, **one}, bv, 2, constants=p.constants)
                both = numeric_flow(fm.char, start, av + bv, 2, constants=p.constants)
                consts_f = {s: sp.Float(v) for s, v in p.constant_symbols.items()}
                for c in targets:
                    closed = fm.coordinate(c).xreplace({a: sp.Float(av + bv), **consts_f})
                    closed = float(closed.xreplace({k: sp.Float(v) for k, v in start.items()}))
                    worst_group = max(worst_group, abs(two[c] - both[c]), abs(both[c] - closed))
    ok = worst_id <= 1e-8 and worst_group <= 1e-7
    report(7, ok, f"{nflows} flows: identity max err {worst_id:.2e}, group law max err {worst_group:.2e}")


# 8 ---------------------------------------------------------------------------

def test_criterion_8_closure(report):
    S = JetSpace(("x",), ("u",))

    def fam(*texts):
        return [Generator.of(S, parse_expr(t, S)) for t in texts]

    heat = closure_report(fam("u_xx", "x*u", "x^2*u", "u_x", "x*u_x", "u"), samples=20)
    bad = closure_report(fam("u_xx", "u^2"), samples=20)
    tr = closure_report(fam("u*u_x", "u"), samples=20)
    var = max(p.variance for p in tr.pairs)
    ok = heat.closed and not bad.closed and tr.closed and var <= 1e-8
    lam = [round(float(v), 9) for v in tr.pairs[0].coefficients] if tr.closed else None
    report(8, ok, f"heat closed={heat.closed}, {{u_xx,u^2}} closed={bad.closed}, "
                  f"transport closed={tr.closed} lambda={lam} variance={var:.1e}")


# 9 ---------------------------------------------------------------------------

def newton_failure_scan(H, dH, xs, ts, tol=1e-12, max_iter=60):
    """First t at which the characteristic foot ``x = x0 - t H(x0)`` cannot be found.

    Independent of the package: plain Newton from the cold start ``x0 = x``
    at every grid point, failing on non-convergence or a vanishing slope.
    """
    for t in ts:
        for x in xs:
            x0 = x
            converged = False
            for _ in range(max_iter):
                g = x0 - t * H(x0) - x
                dg = 1 - t * dH(x0)
                if dg <= 1e-8:
                    break
                step = g / dg
                x0 -= step
                if abs(step) <= tol * (1 + abs(x0)):
                    converged = 1 - t * dH(x0) > 1e-8
                    break
            if not converged:
                return float(t)
    return None


def test_criterion_9_breaking(report):
    p = builtin("transport")
    rs = reduced_system(p)
    c = p.coefficients({"c1": 1, "c2": 0})
    xs = np.linspace(-1, 1, 101)
    ts = np.linspace(0, 1, 401)
    tr = integrate_reduced(rs, p.defaults["init"], c, 0.0, 1.0, 400)
    estimate = newton_failure_scan(lambda z: z * z, lambda z: 2 * z, xs, np.linspace(0, 1, 2001))
    detected = None
    try:
        implicit_solution_eval("x^2", tr["a"], tr["b"], xs, ts)
    except BreakingDetected as exc:
        detected = exc.t
    ok = detected is not None and estimate is not None and np.isfinite(detected) \
        and detected <= 1.5 * estimate
    report(9, ok, f"BREAKING_DETECTED at t={detected}, Newton-scan estimate {estimate}")
