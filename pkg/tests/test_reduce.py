import numpy as np
import pytest
import sympy as sp

from jetreduce.errors import (BreakingDetected, ConfigError, DomainExit, NumericalBlowup)
from jetreduce.problems import builtin, expected_solution, heat_parameters, transport_solution
from jetreduce.reduce import (CoefficientSet, SolutionField, implicit_solution_eval,
                              integrate_reduced, reconstruct, reduced_system)
from jetreduce.symexpr import is_zero


def test_coefficient_set_forms():
    c = CoefficientSet(["c0", "c1", "c2"],
                       {"c0": 1, "c1": "sinh(t)",
                        "c2": {"t": [0, 1], "values": [0, 2]}})
    assert c.value("c0", 0.3) == 1
    assert c.value("c1", 0.5) == pytest.approx(np.sinh(0.5))
    assert c.value("c2", 0.25) == pytest.approx(0.5)
    v = c(np.array([0.0, 0.5]))
    assert v.shape == (3, 2)
    assert c.is_constant("c0") and not c.is_constant("c1") and not c.is_constant("c2")
    with pytest.raises(ConfigError):
        c.constant("c1")
    with pytest.raises(ConfigError):
        c.check_interval(0, 2)
    desc = c.describe()
    assert desc["c0"] == "1" and desc["c2"]["values"] == [0.0, 2.0]


@pytest.mark.parametrize("specs", [{"c9": 1}, {"c0": "x*t"},
                                   {"c0": {"t": [1, 0], "values": [0, 1]}}])
def test_coefficient_set_rejects(specs):
    with pytest.raises(ConfigError):
        CoefficientSet(["c0"], specs)


def test_solution_field_csv_round_trip(tmp_path):
    t = np.linspace(0, 1, 3)
    x = np.linspace(-1, 1, 4)
    f = SolutionField(t, x, {"u": np.outer(t, x) + 1 / 3, "v": np.outer(t + 1, x)})
    path = tmp_path / "f.csv"
    f.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x,u,v" and len(lines) == 1 + 12
    assert lines[2].split(",")[:2] == ["0", "-0.33333333333333337"]
    g = SolutionField.from_csv(path)
    assert np.array_equal(g["u"], f["u"]) and np.array_equal(g["v"], f["v"])
    with pytest.raises(ValueError):
        SolutionField(t, x, {"u": np.zeros((2, 2))})


def test_heat_trajectory_matches_quadrature():
    p = builtin("heat")
    rs = reduced_system(p)
    c = p.coefficients()
    init = p.defaults["init"]
    tr = integrate_reduced(rs, init, c, 0.0, 0.1, 100)
    A, B = heat_parameters(tr.t, c, init["a"], init["b"])[:2]
    assert np.max(np.abs(tr["a"] - A)) < 1e-10
    assert np.max(np.abs(tr["b"] - B)) < 1e-10
    assert tr.error_estimate.max() < 1e-10


def test_integrate_errors():
    p = builtin("heat")
    rs = reduced_system(p)
    c = p.coefficients({"c1": 0, "c2": 0})
    with pytest.raises(ConfigError):
        integrate_reduced(rs, p.defaults["init"], c, 0.0, 0.1, 8)
    with pytest.raises(ConfigError):
        integrate_reduced(rs, {"u": 1.0}, c, 0.0, 0.1, 100)
    # b' = -4 b^2 from b(0) = -1 blows up at t = 1/4
    with pytest.raises(NumericalBlowup) as info:
        integrate_reduced(rs, {"u": 1.0, "a": 0.0, "b": -1.0}, c, 0.0, 1.0, 400)
    assert 0.2 < info.value.t <= 0.3


@pytest.mark.parametrize("label", ["transport", "heat", "kdv"])
def test_dual_route_parameter_rates(label):
    rs = reduced_system(builtin(label))
    for k in range(len(rs.fields)):
        for a, b in zip(rs.direct_parameter_rates(k), rs.psi[k]):
            assert is_zero(a - b, fixed=rs.constants)


@pytest.mark.slow
def test_dual_route_parameter_rates_twocomp():
    rs = reduced_system(builtin("twocomp"))
    for k in range(len(rs.fields)):
        for a, b in zip(rs.direct_parameter_rates(k), rs.psi[k]):
            assert is_zero(a - b, fixed=rs.constants)


@pytest.mark.parametrize("label", ["transport", "heat", "kdv", "twocomp"])
def test_flat_and_decoupled(label):
    rs = reduced_system(builtin(label))
    assert rs.is_flat()
    assert all(rs.psi_decoupled)


def test_twocomp_a_decoupling():
    # the (a, b, c) rates involve only parameters and fixed constants
    rs = reduced_system(builtin("twocomp"))
    params = set(rs.params)
    for k in range(len(rs.fields)):
        for r in rs.psi[k]:
            assert r.free_symbols <= params | set(rs.constants)


def test_reconstruct_domain_exit():
    p = builtin("transport")
    rs = reduced_system(p)
    c = p.coefficients({"c1": 1, "c2": 0})
    tr = integrate_reduced(rs, p.defaults["init"], c, 0.0, 0.4, 40)
    with pytest.raises(DomainExit):
        reconstruct(rs, tr, np.linspace(-1, 1, 41))


def test_reconstruct_requires_increasing_grid():
    p = builtin("heat")
    rs = reduced_system(p)
    tr = integrate_reduced(rs, p.defaults["init"], p.coefficients(), 0.0, 0.1, 20)
    with pytest.raises(ConfigError):
        reconstruct(rs, tr, np.array([0.0, -0.5, 1.0]))


def test_twocomp_reconstruct_against_closed_form():
    p = builtin("twocomp")
    rs = reduced_system(p)
    c = p.coefficients()
    init = p.defaults["init"]
    xs = np.linspace(-1, 1, 41)
    tr = integrate_reduced(rs, init, c, 0.0, 0.1, 20)
    f = reconstruct(rs, tr, xs)
    ref = expected_solution("twocomp", xs, tr.t, c, init)
    for comp in ("u", "v"):
        assert np.max(np.abs(f[comp] - ref[comp])) / np.max(np.abs(ref[comp])) < 1e-8


def test_implicit_matches_closed_form_before_breaking():
    p = builtin("transport")
    c = p.coefficients({"c1": 1, "c2": 0.2})
    xs = np.linspace(-1, 1, 51)
    ts = np.linspace(0, 0.2, 21)
    ref = transport_solution(xs, ts, c, {"a": 0.0, "b": 0.0})
    got = implicit_solution_eval("x^2", ref.meta["A"], ref.meta["B"], xs, ts)
    assert np.max(np.abs(got["u"] - ref["u"])) < 1e-10


def test_implicit_pure_dilation():
    # with c1 = 0 the seed is only rescaled: U = exp(-B) H(x)
    xs = np.linspace(-1, 1, 21)
    ts = np.linspace(0, 1, 11)
    B = -0.3 * ts
    got = implicit_solution_eval("x^2", np.zeros_like(ts), B, xs, ts)
    assert np.allclose(got["u"], np.exp(-B)[:, None] * xs[None, :] ** 2, rtol=1e-13, atol=1e-15)


def test_implicit_breaking_and_bad_seed():
    xs = np.linspace(-1, 1, 21)
    ts = np.linspace(0, 1, 41)
    with pytest.raises(BreakingDetected) as info:
        implicit_solution_eval("x^2", -ts, np.zeros_like(ts), xs, ts)
    assert info.value.t == pytest.approx(0.25)
    assert info.value.field.t_grid.size == 10
    with pytest.raises(ConfigError):
        implicit_solution_eval("x*u", -ts, 0 * ts, xs, ts)


def test_heat_riccati_closed_form():
    p = builtin("heat")
    rs = reduced_system(p)
    tr = integrate_reduced(rs, {"u": 1.0, "a": 0.0, "b": 0.5}, p.coefficients({"c1": 0, "c2": 0}),
                           0.0, 0.5, 200)
    assert np.max(np.abs(tr["b"] - 0.5 / (1 + 2.0 * tr.t))) < 1e-9


@pytest.mark.parametrize("H", ["1+x^2/4", "2+sin(x)/3", "exp(x/2)"])
def test_implicit_relation_for_sampled_seeds(H):
    from jetreduce.oracle import fd_residual
    from jetreduce.problems import transport_parameters

    p = builtin("transport")
    c = p.coefficients({"c1": 0.5, "c2": 0.2})
    fields = []
    for n in (41, 81, 161):
        xs = np.linspace(-1, 1, n)
        ts = np.linspace(0, 0.2, n)
        A, B = transport_parameters(ts, c, 0.0, 0.0)
        fields.append(implicit_solution_eval(H, A, B, xs, ts))
    rep = fd_residual(fields[0], p, c, refined=fields[1:])
    assert all(abs(o - 2) < 0.3 for o in rep.orders)


def test_kdv_branch_points_follow_the_crest():
    p = builtin("kdv")
    rs = reduced_system(p)
    tr = integrate_reduced(rs, p.defaults["init"], p.coefficients({"c1": 0, "c2": 0}), 0.0, 1.0, 20)
    xs = np.linspace(-10, 10, 201)
    f = reconstruct(rs, tr, xs)
    # the soliton crest moves with speed beta0 = 1; u_x changes sign there
    for t, pts in zip(tr.t[1:], f.meta["branch_points"][1:]):
        assert len(pts) == 1 and abs(pts[0] + t) <= xs[1] - xs[0]
