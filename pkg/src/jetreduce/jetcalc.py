"""Total derivatives, evolutionary vector fields and their brackets."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import sympy as sp

from .errors import DegenerateSampling, DomainError
from .symexpr import JetSpace, _eval_terms, multi_indices, sample_point


def total_derivative(e: sp.Expr, space: JetSpace, i: int = 0) -> sp.Expr:
    """``D_i e``: the x_i-partial plus the chain rule through every jet in ``e``."""
    e = sp.sympify(e)
    out = sp.diff(e, space.x(i))
    for c in space.jets_in(e):
        out += space.next_jet(c, i) * sp.diff(e, c)
    return out


def total_derivative_multi(e: sp.Expr, space: JetSpace, sigma: Sequence[int]) -> sp.Expr:
    for i, s in enumerate(sigma):
        for _ in range(s):
            e = total_derivative(e, space, i)
    return e


@dataclass(frozen=True)
class Generator:
    """An n-tuple of jet functions, the characteristic of an evolutionary field."""

    components: tuple
    space: JetSpace
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, compare=False, repr=False, hash=False)

    def __post_init__(self):
        comps = tuple(sp.sympify(c) for c in self.components)
        if len(comps) != self.space.n:
            raise ValueError(f"generator needs {self.space.n} components, got {len(comps)}")
        object.__setattr__(self, "components", comps)

    @classmethod
    def of(cls, space: JetSpace, *components) -> "Generator":
        return cls(tuple(components), space)

    @property
    def order(self) -> int:
        return max(self.space.max_order(c) for c in self.components)

    def is_zero(self) -> bool:
        return all(c == 0 for c in self.components)

    def prolonged(self, k: int, sigma: tuple[int, ...]) -> sp.Expr:
        """``D^sigma`` of the k-th component, memoised per generator."""
        key = (k, tuple(sigma))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if sum(sigma) == 0:
            val = self.components[k]
        else:
            i = next(j for j, s in enumerate(sigma) if s > 0)
            lower = list(sigma)
            lower[i] -= 1
            val = total_derivative(self.prolonged(k, tuple(lower)), self.space, i)
        with self._lock:
            self._cache.setdefault(key, val)
        return self._cache[key]

    def __str__(self):
        return "(" + ", ".join(str(c) for c in self.components) + ")"


def apply_evolution(F: Generator, e: sp.Expr) -> sp.Expr:
    """``V_F(e) = sum over jets u^k_sigma in e of D^sigma(f^k) * d e / d u^k_sigma``."""
    e = sp.sympify(e)
    space = F.space
    out = sp.Integer(0)
    for c in space.jets_in(e):
        info = space.coord(c)
        comp = F.prolonged(info.index, info.sigma)
        if comp != 0:
            out += comp * sp.diff(e, c)
    return out


def bracket(F: Generator, G: Generator) -> Generator:
    """Generator of ``[V_F, V_G]``: components ``V_F(g^k) - V_G(f^k)``."""
    comps = [sp.expand(apply_evolution(F, g) - apply_evolution(G, f))
             for f, g in zip(F.components, G.components)]
    return Generator(tuple(comps), F.space)


@dataclass
class PairResult:
    i: int
    j: int
    bracket: Generator
    status: str
    coefficients: np.ndarray | None
    residual: float
    variance: float | None = None
    rank_deficient: bool = False


@dataclass
class ClosureReport:
    pairs: list[PairResult]
    n_samples: int

    @property
    def closed(self) -> bool:
        return all(p.status == "OK" for p in self.pairs)

    @property
    def structure_constants(self) -> dict:
        return {(p.i, p.j): p.coefficients for p in self.pairs if p.status == "OK"}

    def failures(self) -> list[PairResult]:
        return [p for p in self.pairs if p.status != "OK"]

    def to_dict(self) -> dict:
        return {
            "closed": self.closed,
            "samples": self.n_samples,
            "pairs": [
                {
                    "i": p.i,
                    "j": p.j,
                    "bracket": [str(c) for c in p.bracket.components],
                    "status": p.status,
                    "lambda": None if p.coefficients is None else [float(v) for v in p.coefficients],
                    "residual": float(p.residual),
                    "lambda_variance": None if p.variance is None else float(p.variance),
                    "rank_deficient": p.rank_deficient,
                }
                for p in self.pairs
            ],
        }


def _prolonged_rows(gen: Generator, depth: int) -> list[sp.Expr]:
    rows = []
    for k in range(gen.space.n):
        for sigma in multi_indices(gen.space.m, depth):
            rows.append(gen.prolonged(k, sigma))
    return rows


@dataclass
class CombinationFit:
    """Least-squares representation ``target = sum_h c_h basis_h`` over sampled jets."""

    status: str
    coefficients: np.ndarray | None
    residual: float
    variance: float
    rank_deficient: bool


class _Sampler:
    """Evaluates prolonged generators at a common set of random jet points."""

    def __init__(self, gens: Sequence[Generator], depth: int, samples: int,
                 rng: np.random.Generator, fixed: dict):
        self.depth = depth
        self.fixed = fixed
        self.rows = [_prolonged_rows(g, depth) for g in gens]
        symbols = set(gens[0].space.xs)
        for rows in self.rows:
            for r in rows:
                symbols |= r.free_symbols
        self.symbols = sorted(symbols - set(fixed), key=lambda s: s.name)
        self.rng = rng
        self.samples = samples
        self.points: list[dict] = []
        self.columns: list[np.ndarray] = []
        attempts = 0
        while len(self.points) < samples:
            attempts += 1
            if attempts > 1000:
                raise DegenerateSampling("could not find enough valid sample points")
            pt = self._draw()
            try:
                cols = np.array([[_eval_terms(r, pt)[0] for r in rows] for rows in self.rows]).T
            except DomainError:
                continue
            self.points.append(pt)
            self.columns.append(cols)

    def _draw(self):
        pt = dict(self.fixed)
        pt.update(sample_point(self.symbols, self.rng))
        return pt

    def evaluate(self, target: Generator) -> list[np.ndarray]:
        rows = _prolonged_rows(target, self.depth)
        out = []
        for pt in self.points:
            for s in set().union(*[r.free_symbols for r in rows]) - set(pt):
                pt[s] = float(self.rng.uniform(0.2, 1.7))
            out.append(np.array([_eval_terms(r, pt)[0] for r in rows]))
        return out


def _fit(sampler: _Sampler, target: Generator, tol: float) -> CombinationFit:
    ncols = sampler.columns[0].shape[1]
    if target.is_zero():
        return CombinationFit("OK", np.zeros(ncols), 0.0, 0.0, False)
    rhs = sampler.evaluate(target)
    A = np.vstack(sampler.columns)
    bvec = np.concatenate(rhs)
    scale = 1.0 + np.max(np.abs(bvec))
    rank = np.linalg.matrix_rank(A, tol=1e-10 * max(1.0, np.max(np.abs(A))))
    lam, *_ = np.linalg.lstsq(A, bvec, rcond=None)
    resid = float(np.max(np.abs(A @ lam - bvec)) / scale)
    local, local_res = [], []
    for M, r in zip(sampler.columns, rhs):
        c, *_ = np.linalg.lstsq(M, r, rcond=None)
        local.append(c)
        local_res.append(np.max(np.abs(M @ c - r)) / (1.0 + np.max(np.abs(r))))
    variance = float(np.max(np.var(np.array(local), axis=0)))
    if resid <= tol:
        status = "OK"
    elif max(local_res) <= tol:
        status = "NOT_CONSTANT"
    else:
        status = "NOT_IN_SPAN"
    return CombinationFit(status, lam if status == "OK" else None, resid, variance, rank < ncols)


def fit_constant_combination(target: Generator, basis: Sequence[Generator], samples: int = 20,
                             tol: float = 1e-6, rng: np.random.Generator | None = None,
                             fixed: dict | None = None) -> CombinationFit:
    rng = rng if rng is not None else np.random.default_rng(7)
    depth = max(2, len(basis))
    sampler = _Sampler(list(basis), depth, samples, rng, dict(fixed or {}))
    return _fit(sampler, target, tol)


def closure_report(gens: Sequence[Generator], samples: int = 20, tol: float = 1e-6,
                   rng: np.random.Generator | None = None, fixed: dict | None = None) -> ClosureReport:
    """Check that every pairwise bracket is a constant-coefficient combination.

    Each bracket ``H_ij`` and every generator is prolonged to a common depth
    and evaluated at ``samples`` random jet points. A single least-squares fit
    over all points gives the candidate constants; pointwise fits decide
    between NOT_IN_SPAN and NOT_CONSTANT when the global fit fails.
    """
    if samples < 20:
        raise ValueError("closure needs at least 20 sample points")
    gens = list(gens)
    rng = rng if rng is not None else np.random.default_rng(7)
    sampler = _Sampler(gens, max(2, len(gens)), samples, rng, dict(fixed or {}))
    pairs = []
    for i in range(len(gens)):
        for j in range(i + 1, len(gens)):
            H = bracket(gens[i], gens[j])
            fit = _fit(sampler, H, tol)
            pairs.append(PairResult(i, j, H, fit.status, fit.coefficients, fit.residual,
                                    fit.variance, fit.rank_deficient))
    return ClosureReport(pairs, samples)
