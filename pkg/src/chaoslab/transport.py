"""State and path metrics, exact W2 between finite laws, empirical couplings.

Two ambient spaces are supported:

``"euclid"``
    atoms are points of R^d, metric is the Euclidean norm.
``"path"``
    atoms are stopped grid paths of shape ``(k+1, d)`` and the metric is the
    truncated uniform distance ``min(sup_j |x_j - y_j|, 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import kernels
from .errors import DimensionMismatch, SizeMismatch, SpaceMismatch

MERGE_TOL = 1e-12
SPACES = ("euclid", "path")


def metric_euclid(x, y) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    return float(np.linalg.norm(x - y))


def _as_path(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def metric_path(x, y) -> float:
    """min(sup_j |x_j - y_j|, 1) for paths given as (k+1,) or (k+1, d) arrays."""
    x, y = _as_path(x), _as_path(y)
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    return float(min(np.max(np.linalg.norm(x - y, axis=-1)), 1.0))


METRICS = {"euclid": metric_euclid, "path": metric_path}


def cost_matrix(xs, ys, space: str = "euclid") -> np.ndarray:
    """Squared distances between two stacks of atoms."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if space == "euclid":
        if xs.ndim == 1:
            xs = xs[:, None]
        if ys.ndim == 1:
            ys = ys[:, None]
        if xs.shape[1:] != ys.shape[1:]:
            raise DimensionMismatch(f"{xs.shape[1:]} vs {ys.shape[1:]}")
        diff = xs[:, None, :] - ys[None, :, :]
        return np.sum(diff ** 2, axis=-1)
    if space == "path":
        if xs.ndim == 2:
            xs = xs[:, :, None]
        if ys.ndim == 2:
            ys = ys[:, :, None]
        if xs.shape[1:] != ys.shape[1:]:
            raise DimensionMismatch(f"{xs.shape[1:]} vs {ys.shape[1:]}")
        diff = xs[:, None] - ys[None, :]
        sup = np.max(np.sqrt(np.sum(diff ** 2, axis=-1)), axis=-1)
        return np.minimum(sup, 1.0) ** 2
    raise SpaceMismatch(f"unknown space {space!r}")


@dataclass(frozen=True)
class DiscreteLaw:
    """Finite measure; ``atoms`` stacks points along axis 0."""

    atoms: np.ndarray
    weights: np.ndarray
    space: str = "euclid"

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if self.space not in SPACES:
            raise SpaceMismatch(f"unknown space {self.space!r}")
        if self.space == "euclid" and a.ndim == 1:
            a = a[:, None]
        if self.space == "path" and a.ndim == 2:
            a = a[:, :, None]
        if w.ndim != 1 or w.size != a.shape[0]:
            raise ValueError("one weight per atom")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.size

    @classmethod
    def from_samples(cls, xs, weights=None, space="euclid", merge=True) -> "DiscreteLaw":
        xs = np.asarray(xs, dtype=float)
        w = np.full(xs.shape[0], 1.0 / xs.shape[0]) if weights is None else np.asarray(weights, float)
        if merge:
            return merge_atoms(xs, w, space)
        return cls(xs, w, space)

    @classmethod
    def dirac(cls, point, space="euclid") -> "DiscreteLaw":
        return cls(np.asarray(point, dtype=float)[None], [1.0], space)

    def mean(self) -> np.ndarray:
        return np.tensordot(self.weights, self.atoms, axes=1)


def merge_atoms(atoms, weights, space="euclid", tol: float = MERGE_TOL) -> DiscreteLaw:
    """Sum the weights of atoms within ``tol`` (max-abs) of each other; drop zeros."""
    atoms = np.asarray(atoms, dtype=float)
    weights = np.asarray(weights, dtype=float)
    flat = atoms.reshape(atoms.shape[0], -1)
    order = np.lexsort(flat.T[::-1]) if flat.shape[1] else np.arange(flat.shape[0])
    flat, weights, atoms = flat[order], weights[order], atoms[order]
    if flat.shape[0] > 1:
        new_group = np.any(np.abs(np.diff(flat, axis=0)) > tol, axis=1)
        starts = np.concatenate([[0], np.flatnonzero(new_group) + 1])
    else:
        starts = np.array([0])
    w = np.add.reduceat(weights, starts)
    keep = w > 0
    w = w[keep] / w[keep].sum()
    return DiscreteLaw(atoms[starts][keep], w, space)


def _check_pair(p: DiscreteLaw, q: DiscreteLaw):
    if p.space != q.space:
        raise SpaceMismatch(f"{p.space} vs {q.space}")
    if p.atoms.shape[1:] != q.atoms.shape[1:]:
        raise SpaceMismatch(f"atom shapes {p.atoms.shape[1:]} vs {q.atoms.shape[1:]}")


def transport_plan(p: DiscreteLaw, q: DiscreteLaw):
    """Optimal plan and squared cost for the W2 transportation problem."""
    _check_pair(p, q)
    cost = cost_matrix(p.atoms, q.atoms, p.space)
    # rebalance the column marginal so both sides carry the same total
    b = q.weights * (p.weights.sum() / q.weights.sum())
    tol = 1e-13 * max(1.0, float(cost.max()))
    plan, obj, _ = kernels.transport_simplex(p.weights, b, cost, tol)
    return plan, max(float(obj), 0.0)


def w2_discrete(p: DiscreteLaw, q: DiscreteLaw, metric=None) -> float:
    """Exact W2 between finite laws; ``metric`` may override the law's space."""
    if metric is not None:
        space = metric if isinstance(metric, str) else _space_of(metric)
        if space != p.space or space != q.space:
            p = DiscreteLaw(p.atoms, p.weights, space)
            q = DiscreteLaw(q.atoms, q.weights, space)
    return float(np.sqrt(transport_plan(p, q)[1]))


def _space_of(metric) -> str:
    for k, fn in METRICS.items():
        if fn is metric:
            return k
    raise SpaceMismatch("metric must be metric_euclid or metric_path")


def w2_1d(p: DiscreteLaw, q: DiscreteLaw) -> float:
    """Quantile-coupling W2 on R, integrated exactly over merged breakpoints."""
    if p.atoms.shape[1:] != (1,) or q.atoms.shape[1:] != (1,):
        raise DimensionMismatch("w2_1d needs scalar atoms")
    xa, xw = _sorted(p)
    ya, yw = _sorted(q)
    cx, cy = np.cumsum(xw), np.cumsum(yw)
    cx[-1] = cy[-1] = 1.0
    u = np.union1d(cx, cy)
    lo = np.concatenate([[0.0], u[:-1]])
    mid = 0.5 * (lo + u)
    qx = xa[np.minimum(np.searchsorted(cx, mid), xa.size - 1)]
    qy = ya[np.minimum(np.searchsorted(cy, mid), ya.size - 1)]
    return float(np.sqrt(np.sum((u - lo) * (qx - qy) ** 2)))


def _sorted(p):
    order = np.argsort(p.atoms[:, 0], kind="stable")
    return p.atoms[order, 0], p.weights[order]


def optimal_assignment(cost) -> np.ndarray:
    """Minimum-cost permutation; lexicographically smallest among optimal ones."""
    cost = np.asarray(cost, dtype=float)
    col, u, v = kernels.hungarian(cost)
    tol = 1e-11 * max(1.0, float(np.abs(cost).max()))
    return np.asarray(kernels.lex_refine(cost, col, u, v, tol))


def w2_empirical_equal(xs, ys, metric=metric_euclid, return_assignment=False):
    """W2 between two equal-size empirical measures via optimal assignment."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape[0] != ys.shape[0] or xs.shape[0] < 1:
        raise SizeMismatch(f"{xs.shape[0]} vs {ys.shape[0]}")
    space = metric if isinstance(metric, str) else _space_of(metric)
    cost = cost_matrix(xs, ys, space)
    sigma = optimal_assignment(cost)
    val = float(np.sqrt(cost[np.arange(cost.shape[0]), sigma].mean()))
    return (val, sigma) if return_assignment else val


def w2_bruteforce(xs, ys, metric=metric_euclid) -> float:
    """Factorial enumeration of permutations; for small test instances only."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    space = metric if isinstance(metric, str) else _space_of(metric)
    cost = cost_matrix(xs, ys, space)
    n = cost.shape[0]
    best = min(sum(cost[i, s[i]] for i in range(n)) for s in permutations(range(n)))
    return float(np.sqrt(best / n))


def empirical_coupling_bound_check(xs, ys, metric=metric_euclid, tol: float = 1e-12) -> bool:
    """W2^2(L^N(x), L^N(y)) <= (1/N) sum_i d(x_i, y_i)^2."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape[0] != ys.shape[0]:
        raise SizeMismatch(f"{xs.shape[0]} vs {ys.shape[0]}")
    space = metric if isinstance(metric, str) else _space_of(metric)
    lhs = w2_empirical_equal(xs, ys, space) ** 2
    rhs = float(np.mean(np.diag(cost_matrix(xs, ys, space))))
    return lhs <= rhs + tol
