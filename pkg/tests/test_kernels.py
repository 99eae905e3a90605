import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from jetreduce import kernels
from jetreduce.kernels import _numba, _numpy


def test_halfwidth():
    assert [kernels.halfwidth(q) for q in (1, 2, 3, 4)] == [1, 1, 2, 2]


@pytest.mark.parametrize("impl", [_numpy, _numba])
def test_stencils_exact_on_polynomials(impl):
    x = np.linspace(-1, 1, 41)
    dx = x[1] - x[0]
    u = (x ** 4 - 2 * x ** 3 + x)[None, :]
    J = impl.central_jets(u, 4, dx, False)
    h = 2
    inner = slice(h, -h)
    assert np.allclose(J[0, 0], u[0])
    # truncation terms are exact on a quartic
    d3 = 24 * x - 12
    assert np.allclose(J[1, 0, inner], (4 * x ** 3 - 6 * x ** 2 + 1 + dx ** 2 / 6 * d3)[inner])
    assert np.allclose(J[2, 0, inner], (12 * x ** 2 - 12 * x + 2 * dx ** 2)[inner])
    assert np.allclose(J[3, 0, inner], d3[inner], atol=1e-8)
    assert np.allclose(J[4, 0, inner], 24, atol=1e-6)
    assert np.all(np.isnan(J[1:, 0, :h])) and np.all(np.isnan(J[1:, 0, -h:]))


@pytest.mark.parametrize("impl", [_numpy, _numba])
def test_periodic_second_order(impl):
    errs = []
    for n in (64, 128):
        x = np.linspace(0, 2 * np.pi, n, endpoint=False)
        J = impl.central_jets(np.sin(x)[None, :], 3, x[1] - x[0], True)
        errs.append(np.max(np.abs(J[3, 0] + np.cos(x))))
    assert 3.7 < errs[0] / errs[1] < 4.3


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(7, 40)),
              elements=st.floats(-10, 10)),
       st.integers(1, 4), st.booleans())
def test_backends_agree_on_jets(u, q, periodic):
    a = _numpy.central_jets(u, q, 0.1, periodic)
    b = _numba.central_jets(u, q, 0.1, periodic)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-9, equal_nan=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 50), st.integers(0, 2 ** 31))
def test_backends_agree_on_polynomials(nv, nm, n, seed):
    rng = np.random.default_rng(seed)
    vars_ = rng.uniform(-2, 2, size=(nv, n))
    exps = rng.integers(0, 4, size=(nm, nv)).astype(np.int64)
    W = rng.normal(size=(3, nm))
    assert np.allclose(_numpy.monomials(vars_, exps), _numba.monomials(vars_, exps), rtol=1e-13)
    assert np.allclose(_numpy.poly_eval(vars_, exps, W), _numba.poly_eval(vars_, exps, W),
                       rtol=1e-12, atol=1e-12)


def test_parallel_paths_agree():
    rng = np.random.default_rng(1)
    vars_ = rng.uniform(0.5, 1.5, size=(5, 5 * _numba.BLOCK + 17))
    exps = rng.integers(0, 3, size=(7, 5)).astype(np.int64)
    W = rng.normal(size=(2, 7))
    assert np.allclose(_numba._monomials_parallel(vars_, exps), _numpy.monomials(vars_, exps))
    assert np.allclose(_numba._poly_eval_parallel(vars_, exps, W), _numpy.poly_eval(vars_, exps, W))


def _backend_with(env_value):
    env = dict(os.environ)
    if env_value is None:
        env.pop("JETREDUCE_DISABLE_NUMBA", None)
    else:
        env["JETREDUCE_DISABLE_NUMBA"] = env_value
    out = subprocess.run([sys.executable, "-c", "from jetreduce import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    return out.stdout.strip()


def test_env_flag_selects_backend():
    assert _backend_with(None) == "numba"
    assert _backend_with("0") == "numba"
    assert _backend_with("1") == "numpy"


def test_pipeline_identical_under_fallback(tmp_path):
    # residual of a stored heat solution must not depend on the kernel backend
    from jetreduce.problems import builtin, expected_solution

    p = builtin("heat")
    f = expected_solution("heat", np.linspace(-1, 1, 41), np.linspace(0, 0.1, 41), p.coefficients())
    path = tmp_path / "f.csv"
    f.to_csv(path)
    code = ("import sys, json; from jetreduce.oracle import fd_residual; "
            "from jetreduce.problems import builtin; from jetreduce.reduce import SolutionField; "
            "from jetreduce import kernels; "
            f"r = fd_residual(SolutionField.from_csv({str(path)!r}), builtin('heat')); "
            "print(kernels.BACKEND, repr(r.l2))")
    outs = []
    for flag in ("0", "1"):
        env = {**os.environ, "JETREDUCE_DISABLE_NUMBA": flag}
        outs.append(subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                                   env=env, check=True).stdout.split())
    assert outs[0][0] == "numba" and outs[1][0] == "numpy"
    assert float(outs[0][1]) == pytest.approx(float(outs[1][1]), rel=1e-12)
