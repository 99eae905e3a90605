import numpy as np
import pytest
import sympy as sp

from jetreduce.charflow import (FlowMap, characteristic_field, compose_pullback, filtration_check,
                                first_order_char, numeric_flow, register_closed_form_flow)
from jetreduce.errors import (FlowEscaped, GeneratorMismatch, NotScalar, OrderTooHigh,
                              SingularJacobian, UnboundCoordinate)
from jetreduce.jetcalc import Generator
from jetreduce.symexpr import JetSpace, eval_at, parse_expr

S = JetSpace(("x",), ("u",))
x, u, ux, uxx = S.x(), S.u(0, 0), S.u(0, 1), S.u(0, 2)
a = sp.Symbol("a", real=True)


def P(t):
    return parse_expr(t, S)


def transport_char():
    G = Generator.of(S, P("u*u_x"))
    return characteristic_field(G, first_order_char(G)[1])


def test_first_order_split():
    g0, h = first_order_char(Generator.of(S, P("u*u_x + x*u")))
    assert g0.components[0] == x * u and h == (u,)
    with pytest.raises(OrderTooHigh):
        first_order_char(Generator.of(S, P("u_xx")))
    with pytest.raises(OrderTooHigh):
        first_order_char(Generator.of(S, P("u_x^2")))
    S2 = JetSpace(("x",), ("u", "v"))
    with pytest.raises(NotScalar):
        first_order_char(Generator.of(S2, parse_expr("u_x", S2), parse_expr("0", S2)))


def test_char_field_components():
    ch = transport_char()
    assert ch.on_coordinate(x) == -u
    assert ch.on_coordinate(u) == 0
    # D_x(u u_x) - u u_xx
    assert sp.expand(ch.on_coordinate(ux) - ux ** 2) == 0


def test_closed_form_prolongation():
    fm = register_closed_form_flow(transport_char(), a, {x: x - a * u, u: u})
    assert sp.simplify(fm.coordinate(ux) - ux / (1 - a * ux)) == 0
    assert sp.simplify(fm.coordinate(uxx) - uxx / (1 - a * ux) ** 3) == 0


def test_mismatched_closed_form():
    with pytest.raises(GeneratorMismatch):
        register_closed_form_flow(transport_char(), a, {x: x + a * u, u: u})
    with pytest.raises(GeneratorMismatch):
        register_closed_form_flow(transport_char(), a, {x: x - a * u + a ** 2, u: u + a})


def test_numeric_flow_matches_closed_form():
    ch = transport_char()
    fm = register_closed_form_flow(ch, a, {x: x - a * u, u: u})
    pt = {x: 1.0, u: 2.0, ux: 0.7, uxx: 0.4, S.u(0, 3): 0.1}
    got = numeric_flow(ch, pt, 0.3, 2)
    for c in (x, u, ux, uxx):
        want = eval_at(fm.coordinate(c).subs(a, 0.3), pt)
        assert got[c] == pytest.approx(want, rel=1e-9, abs=1e-10)


def test_flow_escape_and_unbound():
    ch = transport_char()
    # u_x / (1 - a u_x) blows up at a = 1/2
    with pytest.raises(FlowEscaped) as info:
        numeric_flow(ch, {x: 1.0, u: 2.0, ux: 2.0}, 0.6, 1)
    assert info.value.last_parameter == pytest.approx(0.5, abs=1e-3)
    with pytest.raises(UnboundCoordinate):
        numeric_flow(ch, {x: 1.0, u: 2.0}, 0.1, 1)


def test_singular_jacobian():
    fm = FlowMap(transport_char(), a, {x: sp.Integer(1), u: u})
    with pytest.raises(SingularJacobian):
        fm.coordinate(ux)


def test_compose_order():
    b = sp.Symbol("b", real=True)
    fa = register_closed_form_flow(transport_char(), a, {x: x - a * u, u: u})
    fb = register_closed_form_flow(characteristic_field(Generator.of(S, u)), b,
                                   {u: sp.exp(b) * u})
    e = compose_pullback([fb, fa], u)
    assert sp.simplify(e - sp.exp(b) * u) == 0
    e = compose_pullback([fb, fa], x)
    assert sp.simplify(e - (x - a * sp.exp(b) * u)) == 0
    assert compose_pullback([fa, fb], x) == x - a * u


def test_filtration():
    ch = transport_char()
    assert filtration_check([x, u], [ch]).ok
    rep = filtration_check([x], [ch])
    assert not rep.ok and rep.failures
    with pytest.raises(ValueError):
        filtration_check([x, u], [ch], samples=5)


def test_shift_count_checked():
    with pytest.raises(ValueError):
        characteristic_field(Generator.of(S, u), (0, 0))
