import itertools

import numpy as np
import pytest
from scipy.optimize import linprog

from chaoslab import transport as T
from chaoslab.errors import DimensionMismatch, SizeMismatch, SpaceMismatch


def lp_w2(p, q, space="euclid"):
    """W2 from the transportation LP solved by HiGHS."""
    c = T.cost_matrix(p.atoms, q.atoms, space)
    m, n = c.shape
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n:(i + 1) * n] = 1
    for j in range(n):
        A[m + j, j::n] = 1
    res = linprog(c.ravel(), A_eq=A, b_eq=np.concatenate([p.weights, q.weights]),
                  bounds=(0, None), method="highs")
    return float(np.sqrt(max(res.fun, 0.0)))


def random_law(rng, n, dim=1, space="euclid", k=None):
    shape = (n, dim) if space == "euclid" else (n, k, dim)
    return T.DiscreteLaw(rng.normal(size=shape), rng.dirichlet(np.ones(n)), space)


def test_metric_euclid():
    assert T.metric_euclid([0, 0], [0, 0]) == 0.0
    assert T.metric_euclid([0, 0], [3, 4]) == 5.0
    with pytest.raises(DimensionMismatch):
        T.metric_euclid([0, 0], [0, 0, 0])


def test_metric_path():
    x = np.array([0.0, 0.1, 0.2])
    assert T.metric_path(x, x) == 0.0
    assert T.metric_path(x, x + np.array([0, 2.0, 0])) == 1.0
    assert T.metric_path(x, x + np.array([0, 0.3, -0.1])) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(DimensionMismatch):
        T.metric_path(x, x[:2])


def test_metric_axioms(rng):
    for _ in range(200):
        x, y, z = rng.normal(size=(3, 4, 2)) * rng.uniform(0.1, 2)
        for f in (T.metric_euclid, T.metric_path):
            a, b = (x[0], y[0]) if f is T.metric_euclid else (x, y)
            c = z[0] if f is T.metric_euclid else z
            assert f(a, b) == f(b, a)
            assert f(a, b) <= f(a, c) + f(c, b) + 1e-12


def test_w2_discrete_examples():
    d0, d3 = T.DiscreteLaw.dirac([0.0]), T.DiscreteLaw.dirac([3.0])
    assert T.w2_discrete(d0, d3) == 3.0
    p0 = T.DiscreteLaw.dirac([[0.0]], "path")
    p3 = T.DiscreteLaw.dirac([[3.0]], "path")
    assert T.w2_discrete(p0, p3) == 1.0
    assert T.w2_discrete(d0, d3, metric=T.metric_path) == 1.0
    with pytest.raises(SpaceMismatch):
        T.w2_discrete(d0, p3)


def test_w2_matches_lp(rng):
    for _ in range(60):
        p = random_law(rng, int(rng.integers(1, 9)), int(rng.integers(1, 3)))
        q = random_law(rng, int(rng.integers(1, 9)), p.atoms.shape[1])
        assert T.w2_discrete(p, q) == pytest.approx(lp_w2(p, q), abs=1e-9)
    for _ in range(30):
        k = int(rng.integers(1, 4))
        p = random_law(rng, int(rng.integers(1, 6)), 1, "path", k)
        q = random_law(rng, int(rng.integers(1, 6)), 1, "path", k)
        w = T.w2_discrete(p, q)
        assert w == pytest.approx(lp_w2(p, q, "path"), abs=1e-9)
        assert w <= 1.0


def test_w2_1d_examples():
    p = T.DiscreteLaw([[0.0], [1.0]], [0.3, 0.7])
    assert T.w2_1d(p, p) == 0.0
    assert T.w2_1d(T.DiscreteLaw.dirac([0.0]), T.DiscreteLaw.dirac([3.0])) == 3.0
    a = T.DiscreteLaw([[0.0], [2.0]], [0.5, 0.5])
    b = T.DiscreteLaw.dirac([1.0])
    assert T.w2_1d(a, b) == pytest.approx(1.0, abs=1e-15)


def test_w2_1d_matches_simplex(rng):
    for _ in range(100):
        p = random_law(rng, int(rng.integers(1, 12)))
        q = random_law(rng, int(rng.integers(1, 12)))
        assert T.w2_discrete(p, q) == pytest.approx(T.w2_1d(p, q), abs=1e-10)


def test_empirical_equal_examples():
    xs = np.array([[0.0], [2.0]])
    assert T.w2_empirical_equal(xs, xs) == 0.0
    assert T.w2_empirical_equal(xs, [[1.0], [1.0]]) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(SizeMismatch):
        T.w2_empirical_equal(xs, [[1.0]])


def test_empirical_equal_bruteforce(rng):
    for N in range(1, 7):
        for _ in range(10):
            xs, ys = rng.normal(size=(2, N, 2))
            assert T.w2_empirical_equal(xs, ys) == pytest.approx(T.w2_bruteforce(xs, ys), abs=1e-10)


def test_assignment_lexicographic_ties():
    # every permutation is optimal: the identity is the lexicographic minimum
    cost = np.ones((4, 4))
    assert T.optimal_assignment(cost).tolist() == [0, 1, 2, 3]
    cost = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    best = min(sum(cost[i, s[i]] for i in range(3)) for s in itertools.permutations(range(3)))
    opts = sorted(s for s in itertools.permutations(range(3))
                  if sum(cost[i, s[i]] for i in range(3)) == best)
    assert tuple(T.optimal_assignment(cost)) == opts[0]


def test_discrete_equals_empirical_for_uniform(rng):
    for _ in range(30):
        N = int(rng.integers(1, 8))
        xs, ys = rng.normal(size=(2, N, 1))
        p = T.DiscreteLaw(xs, np.full(N, 1 / N))
        q = T.DiscreteLaw(ys, np.full(N, 1 / N))
        assert T.w2_discrete(p, q) == pytest.approx(T.w2_empirical_equal(xs, ys), abs=1e-10)


def test_coupling_bound():
    assert T.empirical_coupling_bound_check([[0.0], [2.0]], [[0.0], [2.0]])
    xs, ys = np.array([[0.0], [2.0]]), np.array([[2.0], [0.0]])
    assert T.w2_empirical_equal(xs, ys) == 0.0
    assert np.mean(np.sum((xs - ys) ** 2, axis=1)) == 4.0
    assert T.empirical_coupling_bound_check(xs, ys)


def test_merge_atoms():
    law = T.merge_atoms(np.array([[1.0], [1.0 + 1e-14], [2.0]]), np.array([0.2, 0.3, 0.5]))
    assert law.size == 2 and np.allclose(law.weights, [0.5, 0.5])


def test_simplex_degenerate_instances():
    # equal marginals on a grid force many degenerate pivots
    n = 12
    x = np.arange(n, dtype=float)[:, None]
    p = T.DiscreteLaw(x, np.full(n, 1 / n))
    q = T.DiscreteLaw(x[::-1] + 0.5, np.full(n, 1 / n))
    assert T.w2_discrete(p, q) == pytest.approx(T.w2_1d(p, q), abs=1e-12)
