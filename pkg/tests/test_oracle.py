import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jetreduce.errors import ConfigError, GridTooCoarse, InstabilityDetected
from jetreduce.jetcalc import Generator
from jetreduce.oracle import RhsTable, fd_residual, mol_reference, step_bound
from jetreduce.problems import builtin, expected_solution
from jetreduce.reduce import SolutionField
from jetreduce.symexpr import JetSpace, parse_expr


def heat_field(n, coeffs=None):
    p = builtin("heat")
    c = p.coefficients(coeffs)
    return expected_solution("heat", np.linspace(-1, 1, n), np.linspace(0, 0.1, n), c), p, c


def test_exact_solution_converges():
    fields = [heat_field(n)[0] for n in (41, 81, 161)]
    p = builtin("heat")
    rep = fd_residual(fields[0], p, refined=fields[1:])
    assert all(abs(o - 2) < 0.3 for o in rep.orders)
    assert rep.order == rep.orders[-1]
    d = rep.to_dict()
    assert d["grid"]["margin_x"] == 1 and d["grid"]["margin_t"] == 1 and len(d["levels"]) == 3
    assert len(rep.per_slice) == 41 - 2


def test_corrupted_field_does_not_converge():
    grids = []
    for n in (41, 81, 161):
        f, p, c = heat_field(n)
        grids.append(SolutionField(f.t_grid, f.x_grid,
                                   {"u": f["u"] + 1e-3 * np.sin(3 * f.x_grid)[None, :]}))
    rep = fd_residual(grids[0], p, c, refined=grids[1:])
    assert all(abs(o) < 0.3 for o in rep.orders)


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_residual_is_linear_for_linear_problems(alpha, beta):
    f, p, c = heat_field(21)
    g = SolutionField(f.t_grid, f.x_grid, {"u": np.cos(f.x_grid)[None, :] * np.exp(-f.t_grid)[:, None]})
    combo = SolutionField(f.t_grid, f.x_grid, {"u": alpha * f["u"] + beta * g["u"]})
    from jetreduce.oracle import _residual_arrays

    table = RhsTable(p)
    Rf = _residual_arrays(f, p, c, table)[0]
    Rg = _residual_arrays(g, p, c, table)[0]
    Rc = _residual_arrays(combo, p, c, table)[0]
    assert np.allclose(Rc, alpha * Rf + beta * Rg, atol=1e-9)


def test_zero_field():
    p = builtin("kdv")
    x = np.linspace(-5, 5, 41)
    t = np.linspace(0, 0.1, 11)
    zero = SolutionField(t, x, {"u": np.zeros((11, 41))})
    rep = fd_residual(zero, p, {"c1": 0, "c2": 0.3}, refined=[zero])
    assert rep.max_abs == 0 and rep.orders == [None]
    m = mol_reference(p, np.zeros(40), p.coefficients({"c1": 0}), x[:-1], [0, 0.05])
    assert np.all(m["u"] == 0)


def test_grid_errors():
    f, p, c = heat_field(21)
    small = SolutionField(f.t_grid[:2], f.x_grid, {"u": f["u"][:2]})
    with pytest.raises(GridTooCoarse):
        fd_residual(small, p, c)
    narrow = SolutionField(f.t_grid, f.x_grid[:4], {"u": f["u"][:, :4]})
    with pytest.raises(GridTooCoarse):
        fd_residual(narrow, p, c)
    xs = np.concatenate([f.x_grid[:10], f.x_grid[10:] + 1e-3])
    with pytest.raises(ConfigError):
        fd_residual(SolutionField(f.t_grid, xs, {"u": f["u"]}), p, c)
    with pytest.raises(ConfigError):
        fd_residual(SolutionField(f.t_grid, f.x_grid, {"w": f["u"]}), p, c)


def kdv_mol(n, t_end, L=20.0):
    p = builtin("kdv")
    c = p.coefficients({"c1": 0, "c2": 0})
    x = np.linspace(-L, L, n + 1)[:-1]
    ts = np.array([0.0, t_end])
    ref = expected_solution("kdv", x, ts, c)
    return mol_reference(p, ref["u"][0], c, x, ts), ref


def test_mol_self_consistency_order():
    errs = []
    for n in (200, 400):
        m, ref = kdv_mol(n, 0.1)
        errs.append(np.sqrt(np.mean((m["u"][-1] - ref["u"][-1]) ** 2)))
    order = np.log2(errs[0] / errs[1])
    assert abs(order - 2) < 0.3


def test_kdv_soliton_speed():
    m, _ = kdv_mol(400, 1.0)
    x = m.x_grid
    u = m["u"][-1]
    j = int(np.argmax(u))
    # vertex of the parabola through the three samples around the maximum
    y0, y1, y2 = u[j - 1], u[j], u[j + 1]
    peak = x[j] + 0.5 * (y0 - y2) / (y0 - 2 * y1 + y2) * (x[1] - x[0])
    speed = -peak / 1.0
    assert speed == pytest.approx(builtin("kdv").constants["beta0"], rel=0.02)


def test_mol_step_checks():
    p = builtin("kdv")
    c = p.coefficients({"c1": 0})
    x = np.linspace(-10, 10, 101)[:-1]
    u0 = 3 / np.cosh(x / 2) ** 2
    dx = x[1] - x[0]
    assert step_bound(dx, 3) == pytest.approx(0.2 * dx ** 3)
    with pytest.raises(ConfigError):
        mol_reference(p, u0, c, x, [0, 0.1], dt=10 * step_bound(dx, 3))
    with pytest.raises(InstabilityDetected):
        mol_reference(p, u0, c, x, [0, 1.0], dt=20 * step_bound(dx, 3), check_bound=False)
    with pytest.raises(ConfigError):
        mol_reference(p, u0, c, x, [0.1, 0.0])


def test_mol_dirichlet_heat():
    f, p, c = heat_field(81)
    t_out = f.t_grid[::20]
    ex = expected_solution("heat", f.x_grid, np.linspace(0, 0.1, 401), c)

    def boundary(t, x_edge):
        i = np.clip(np.searchsorted(ex.t_grid, t), 1, ex.t_grid.size - 1)
        w = (t - ex.t_grid[i - 1]) / (ex.t_grid[i] - ex.t_grid[i - 1])
        row = (1 - w) * ex["u"][i - 1] + w * ex["u"][i]
        return np.interp(x_edge, ex.x_grid, row)

    m = mol_reference(p, f["u"][0], c, f.x_grid, t_out, boundary=boundary)
    assert m.meta["boundary"] != "periodic"
    err = np.max(np.abs(m["u"][-1] - f["u"][-1])) / np.max(np.abs(f["u"][-1]))
    assert err < 1e-3


def test_initial_profile_forms():
    p = builtin("heat")
    c = p.coefficients({"c1": 0, "c2": 0})
    x = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    outs = [mol_reference(p, prof, c, x, [0, 0.01])["u"][-1]
            for prof in ("sin(x)", np.sin, np.sin(x), {"u": np.sin(x)})]
    for o in outs[1:]:
        assert np.allclose(o, outs[0])
    assert np.allclose(outs[0], np.exp(-0.01) * np.sin(x), atol=1e-3)
    with pytest.raises(ConfigError):
        mol_reference(p, "sin(x)*beta", c, x, [0, 0.01])


class _Stub:
    def __init__(self, texts):
        self.space = JetSpace(("x",), ("u",))
        self.gens = [Generator.of(self.space, parse_expr(t, self.space)) for t in texts]
        self.constant_symbols = {}

    def all_generators(self):
        return self.gens


def test_rhs_table_paths():
    poly = RhsTable(_Stub(["u_xx + x*u", "u*u_x"]))
    other = RhsTable(_Stub(["u_xx + x*u", "exp(0*u)*u*u_x"]))
    assert poly.polynomial and not RhsTable(_Stub(["sqrt(u)*u_xx"])).polynomial
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 1.0, 30)
    jets = rng.uniform(0.2, 1.0, (3, 1, 30))
    for cv in (np.array([1.0, 0.5]), rng.uniform(size=(2, 30))):
        want = cv[0] * (jets[2, 0] + x * jets[0, 0]) + cv[1] * jets[0, 0] * jets[1, 0]
        assert np.allclose(poly.evaluate(x, jets, cv)[0], want)
        assert np.allclose(other.evaluate(x, jets, cv)[0], want)
