"""Differential-constraint reduction of evolution equations with time-dependent forcing.

For ``u_t = c_0 F + sum_i c_i(t) G_i`` the package builds a finite-dimensional
submanifold K of the jet space that is invariant under every evolution field
involved, restricts the problem to K as a system of ODEs in t (and in x), and
reconstructs solutions numerically. Symbolic work is done with sympy; the
numerical oracles live in :mod:`jetreduce.oracle`.
"""

from .charflow import CharField, FlowMap, characteristic_field, compose_pullback, numeric_flow
from .constraint import ConstraintManifold, build_constraint, tangency_check
from .errors import JetReduceError
from .jetcalc import Generator, apply_evolution, bracket, closure_report, total_derivative
from .oracle import ResidualReport, fd_residual, mol_reference
from .problems import builtin, expected_solution, labels, problem_from_config
from .reduce import (CoefficientSet, SolutionField, implicit_solution_eval, integrate_reduced,
                     reconstruct, reduced_system)
from .symexpr import JetSpace, is_zero, parse_expr, to_text

__version__ = "0.1.0"

__all__ = [
    "CharField", "CoefficientSet", "ConstraintManifold", "FlowMap", "Generator", "JetReduceError",
    "JetSpace", "ResidualReport", "SolutionField", "apply_evolution", "bracket", "build_constraint",
    "builtin", "characteristic_field", "closure_report", "compose_pullback", "expected_solution",
    "fd_residual", "implicit_solution_eval", "integrate_reduced", "is_zero", "labels",
    "mol_reference", "numeric_flow", "parse_expr", "problem_from_config", "reconstruct",
    "reduced_system", "tangency_check", "to_text", "total_derivative",
]
