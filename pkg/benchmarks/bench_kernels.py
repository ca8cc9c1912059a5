"""Compiled vs pure-Python transport kernels.

Usage: python benchmarks/bench_kernels.py [--repeat R]

Both backends run on identical random inputs; results are checked for
agreement before timings are reported.
"""
import argparse
import time

import numpy as np

from chaoslab import _kernels_py as py
from chaoslab.transport import cost_matrix

try:
    from chaoslab import _kernels as cy
except ImportError:  # extension not built
    cy = None


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_simplex(m, n, rng, repeat):
    a = rng.dirichlet(np.ones(m))
    b = rng.dirichlet(np.ones(n))
    cost = cost_matrix(rng.normal(size=(m, 1)), rng.normal(size=(n, 1)))
    tol = 1e-13 * max(1.0, cost.max())
    tp, (plan_p, obj_p, _) = _best(lambda: py.transport_simplex(a, b, cost, tol), repeat)
    tc, (plan_c, obj_c, _) = _best(lambda: cy.transport_simplex(a, b, cost, tol), repeat)
    assert np.array_equal(plan_p, plan_c) and obj_p == obj_c
    return tp, tc


def bench_assignment(n, rng, repeat):
    cost = cost_matrix(rng.normal(size=(n, 2)), rng.normal(size=(n, 2)))
    tol = 1e-11 * max(1.0, cost.max())

    def run(mod):
        col, u, v = mod.hungarian(cost)
        return np.asarray(mod.lex_refine(cost, col, u, v, tol))

    tp, sp = _best(lambda: run(py), repeat)
    tc, sc = _best(lambda: run(cy), repeat)
    assert np.array_equal(sp, sc)
    return tp, tc


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if cy is None:
        print("compiled extension not built; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'size':>10}{'python [s]':>14}{'compiled [s]':>14}{'speedup':>10}")
    for m in (10, 30, 60):
        tp, tc = bench_simplex(m, m, rng, args.repeat)
        print(f"{'transport_simplex':<22}{f'{m}x{m}':>10}{tp:>14.5f}{tc:>14.5f}{tp / tc:>10.1f}")
    for n in (10, 100, 200):
        tp, tc = bench_assignment(n, rng, args.repeat)
        print(f"{'hungarian+lex_refine':<22}{n:>10}{tp:>14.5f}{tc:>14.5f}{tp / tc:>10.1f}")


if __name__ == "__main__":
    main()
