"""Compare the numba kernels against the numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--points N] [--repeat R]

Also times one full method-of-lines right-hand side for the KdV problem
under each backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from jetreduce.kernels import _numba, _numpy


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def rhs_case(impl, rows, exps, C, dx, q):
    def run():
        jets = impl.central_jets(rows, q, dx, True)
        stacked = np.concatenate([np.zeros((1, rows.shape[1])), jets.reshape(q + 1, -1)])
        return impl.poly_eval(stacked, exps, C)
    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=800)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    u = rng.normal(size=(4, args.points))
    vars_ = rng.uniform(0.5, 1.5, size=(6, args.points))
    exps = rng.integers(0, 3, size=(12, 6)).astype(np.int64)
    W = rng.normal(size=(2, 12))

    print(f"{'kernel':<28}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}  agree")
    cases = [
        ("central_jets q=4 periodic", lambda m: (lambda: m.central_jets(u, 4, 0.01, True))),
        ("central_jets q=2 bounded", lambda m: (lambda: m.central_jets(u, 2, 0.01, False))),
        ("monomials 12x6", lambda m: (lambda: m.monomials(vars_, exps))),
        ("poly_eval 12x6 -> 2", lambda m: (lambda: m.poly_eval(vars_, exps, W))),
    ]
    # KdV: u_xxx + u u_x on a periodic grid
    q = 3
    kdv_exps = np.zeros((2, 1 + q + 1), dtype=np.int64)
    kdv_exps[0, 4] = 1
    kdv_exps[1, 1] = kdv_exps[1, 2] = 1
    C = np.ones((1, 2))
    row = np.exp(-np.linspace(-10, 10, args.points) ** 2)[None, :]
    cases.append(("KdV MOL rhs", lambda m: rhs_case(m, row, kdv_exps, C, 20 / args.points, q)))

    for name, make in cases:
        a, b = make(_numpy), make(_numba)
        ta, tb = best_of(a, args.repeat), best_of(b, args.repeat)
        agree = np.allclose(a(), b(), equal_nan=True, rtol=1e-12, atol=1e-12)
        print(f"{name:<28}{ta * 1e3:>12.3f}{tb * 1e3:>12.3f}{ta / tb:>10.2f}  {agree}")


if __name__ == "__main__":
    main()
