"""Exact finite probability space for N particles over K steps.

Nodes at depth ``k`` are numbered ``0..n_k-1`` with ``n_k = prod_{j<=k} B_j^N``;
the children of node ``a`` at depth ``k`` are ``a * C + c`` for the joint
outcome ``c = sum_i o_i B^(N-1-i)`` of the next step (particle 0 is the most
significant digit), ``C = B^N``.  Integrands ``Z, U`` for the step
``(t_k, t_{k+1}]`` live on depth-``k`` nodes.

Arrays indexed by nodes use the layout ``(n_k, N, d)`` for values,
``(n_k, N, d, p)`` for ``Z``, ``(n_k, N, d, J)`` for ``U`` and
``(n_k, C, N, d)`` for child-indexed quantities such as ``G`` or ``dM``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .driver import DriverModel, StepLaw, tnorm_sq_last
from .errors import BudgetExceeded
from .fvcalc import FVPath, stoch_exp
from .transport import DiscreteLaw, merge_atoms

DEFAULT_BUDGET = 20_000_000


def node_budget() -> int:
    raw = os.environ.get("CHAOSLAB_NODE_BUDGET")
    return int(float(raw)) if raw else DEFAULT_BUDGET


def level_sizes(branching, N: int) -> List[int]:
    sizes = [1]
    for b in branching:
        sizes.append(sizes[-1] * int(b) ** N)
    return sizes


class ScenarioTree:
    """Complete joint tree; per-level data only, leaves are never materialised."""

    def __init__(self, model: DriverModel, N: int, K: Optional[int] = None,
                 budget: Optional[int] = None):
        K = model.K if K is None else int(K)
        if K > model.K or K < 1 or N < 1:
            raise ValueError("need 1 <= K <= model.K and N >= 1")
        budget = node_budget() if budget is None else int(budget)
        self.model = model
        self.N = int(N)
        self.K = K
        self.B = [model.step(k).B for k in range(1, K + 1)]
        self.sizes = level_sizes(self.B, self.N)
        self.n_nodes = sum(self.sizes)
        if self.n_nodes > budget:
            raise BudgetExceeded(self.n_nodes, budget)
        self.C = [b ** self.N for b in self.B]
        self._q = []
        self._digits = []
        for b, st in zip(self.B, (model.step(k) for k in range(1, K + 1))):
            q = np.ones(1)
            for _ in range(self.N):
                q = np.kron(q, st.prob)
            self._q.append(q)
            pw = b ** np.arange(self.N - 1, -1, -1)
            joint = np.arange(b ** self.N)
            dtype = np.uint8 if b < 256 else np.int64
            self._digits.append(((joint[:, None] // pw[None, :]) % b).astype(dtype))
        self._prob = [np.ones(1)]
        for k in range(K - 1):
            self._prob.append(np.kron(self._prob[-1], self._q[k]))

    # ------------------------------------------------------------------
    def step(self, k: int) -> StepLaw:
        """Law of step ``k`` (1-based), the step leaving depth ``k - 1``."""
        return self.model.step(k)

    def q(self, k: int) -> np.ndarray:
        """Joint child probabilities for step k."""
        return self._q[k - 1]

    def digits(self, k: int) -> np.ndarray:
        """Per-particle own outcome of each joint outcome of step k, (C, N)."""
        return self._digits[k - 1]

    def prob(self, k: int, lo: int = 0, hi: Optional[int] = None) -> np.ndarray:
        """Probabilities of depth-k nodes ``lo..hi-1``."""
        hi = self.sizes[k] if hi is None else hi
        if k < len(self._prob):
            return self._prob[k][lo:hi]
        C = self.C[k - 1]
        plo, phi_ = lo // C, -(-hi // C)
        full = np.kron(self._prob[k - 1][plo:phi_], self._q[k - 1])
        return full[lo - plo * C: hi - plo * C]

    def ancestor(self, k: int, idx, j: int):
        """Index at depth ``j <= k`` of the ancestor of depth-k nodes ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        div = 1
        for l in range(j, k):
            div *= self.C[l]
        return idx // div

    def joint_outcome(self, k: int, idx, step: int):
        """Joint outcome of ``step`` (1..k) on the path to depth-k nodes ``idx``."""
        return self.ancestor(k, idx, step) % self.C[step - 1]

    def own_index(self, k: int, idx, i: int):
        """Single-particle tree index at depth k seen by particle ``i``."""
        idx = np.asarray(idx, dtype=np.int64)
        own = np.zeros_like(idx)
        for s in range(1, k + 1):
            joint = self.joint_outcome(k, idx, s)
            o = (joint // self.B[s - 1] ** (self.N - 1 - i)) % self.B[s - 1]
            own = own * self.B[s - 1] + o
        return own

    def chunks(self, k: int, target: int = 1 << 21):
        """Parent ranges at depth k so each chunk has about ``target`` children."""
        per = max(1, target // self.C[k])
        n = self.sizes[k]
        return [(lo, min(n, lo + per)) for lo in range(0, n, per)]


def build_tree(model: DriverModel, N: int, K: Optional[int] = None,
               budget: Optional[int] = None) -> ScenarioTree:
    return ScenarioTree(model, N, K, budget)


# ---------------------------------------------------------------------------
# conditional expectation and representation


def cond_exp(tree: ScenarioTree, values, k: int) -> np.ndarray:
    """E[values | F_{t_k}] for values at depth k+1, flat ``(n_{k+1}, ...)``
    or child-indexed ``(n_k, C, ...)``."""
    values = np.asarray(values, dtype=float)
    C = tree.C[k]
    if values.shape[0] != tree.sizes[k] or values.ndim < 2 or values.shape[1] != C:
        values = values.reshape((-1, C) + values.shape[1:])
    return np.tensordot(tree.q(k + 1), values, axes=([0], [1]))


def _own_marginal(G_i, q, B, N, i):
    """E[G_i | own outcome of particle i]: G_i (n, C, d) -> (n, B, d)."""
    n, C, d = G_i.shape
    w = (G_i * q[None, :, None]).reshape(n, B ** i, B, B ** (N - 1 - i), d)
    return w.sum(axis=(1, 3))


@dataclass
class Representation:
    gbar: np.ndarray   # (n, N, d)
    Z: np.ndarray      # (n, N, d, p)
    U: np.ndarray      # (n, N, d, J)
    Uhat: np.ndarray   # (n, N, d)
    H: np.ndarray      # (n, N, B, d) own-outcome conditional means of G - gbar


def represent(st: StepLaw, q: np.ndarray, N: int, G: np.ndarray) -> Representation:
    """Orthogonal decomposition of child values ``G`` (n, C, N, d) per particle."""
    n, C, _, d = G.shape
    B = st.B
    p = st.diff.shape[1]
    gbar = np.tensordot(q, G, axes=([0], [1]))              # (n, N, d)
    H = np.empty((n, N, B, d))
    for i in range(N):
        H[:, i] = _own_marginal(G[:, :, i, :], q, B, N, i) / st.prob[None, :, None]
    H -= gbar[:, :, None, :]
    pinv = np.linalg.pinv(st.cov, rcond=1e-12, hermitian=True)
    # Z cov = sum_o p_o H[o] x_o^T
    Z = np.einsum("nibd,b,bp->nidp", H, st.prob, st.diff) @ pinv
    J = st.J
    U = np.zeros((n, N, d, J))
    Uhat = np.zeros((n, N, d))
    if J:
        h = np.zeros((n, N, d, J))
        for j in range(J):
            sel = st.atom_index == j
            h[..., j] = np.einsum("nibd,b->nid", H[:, :, sel], st.prob[sel]) / st.jump_prob[j]
        zero = st.atom_index < 0
        if zero.any():
            h0 = np.einsum("nibd,b->nid", H[:, :, zero], st.prob[zero]) / st.prob[zero].sum()
            Uhat = -h0
        U = h + Uhat[..., None]
    return Representation(gbar, Z, U, Uhat, H)


def jump_term(st: StepLaw, U: np.ndarray, Uhat: np.ndarray) -> np.ndarray:
    """U(dX_n) 1_{dX_n != 0} - Uhat on own outcomes: (n, N, d, J) -> (n, N, B, d)."""
    n, N, d, _ = U.shape
    out = np.zeros((n, N, st.B, d))
    nz = st.atom_index >= 0
    if st.J:
        out[:, :, nz, :] = np.moveaxis(U[..., st.atom_index[nz]], -1, 2)
    return out - Uhat[:, :, None, :]


def diff_term(st: StepLaw, Z: np.ndarray) -> np.ndarray:
    """Z dX_o on own outcomes: (n, N, d, p) -> (n, N, B, d)."""
    return np.einsum("nidp,bp->nibd", Z, st.diff)


def residual(st: StepLaw, digits: np.ndarray, G, Y0, Z, U, Uhat) -> np.ndarray:
    """dM = G - Y0 - Z dX_o - (U 1 - Uhat) per child: (n, C, N, d)."""
    own = diff_term(st, Z) + jump_term(st, U, Uhat)       # (n, N, B, d)
    N = G.shape[2]
    out = G - Y0[:, None, :, :]
    for i in range(N):
        out[:, :, i, :] -= own[:, i, digits[:, i], :]
    return out


def mart_repr(tree: ScenarioTree, k: int, G, node: Optional[int] = None):
    """Representation of child values G over step k+1 at depth-k nodes.

    ``G`` is ``(n_k, C, N, d)``; with ``node`` given it is the ``(C, N, d)``
    slice (or ``(C,)`` for a scalar single particle).  Returns
    ``(Z, U, Uhat, dM)``.
    """
    G = np.asarray(G, dtype=float)
    squeeze = node is not None
    if squeeze:
        if G.ndim == 1:
            G = G[:, None, None]
        G = G[None]
    st = tree.step(k + 1)
    rep = represent(st, tree.q(k + 1), tree.N, G)
    dM = residual(st, tree.digits(k + 1), G, rep.gbar, rep.Z, rep.U, rep.Uhat)
    if squeeze:
        return rep.Z[0], rep.U[0], rep.Uhat[0], dM[0]
    return rep.Z, rep.U, rep.Uhat, dM


# ---------------------------------------------------------------------------
# norms


def weights(A: FVPath, beta: float) -> np.ndarray:
    """W_k = E(beta A)_{t_k}; the left limit at t_k is W_{k-1}."""
    return stoch_exp(A.scaled(beta))


def norm_l2_beta(tree: ScenarioTree, xi, A: FVPath, beta: float) -> np.ndarray:
    """E[E(beta A)_{T-} |xi|^2] per particle for leaf values (n_K, N, d)."""
    xi = np.asarray(xi, dtype=float)
    xi = xi.reshape(tree.sizes[tree.K], tree.N, -1)
    W = weights(A, beta)
    return W[tree.K - 1] * np.einsum("n,nid->i", tree.prob(tree.K), xi ** 2)


@dataclass
class BsdeSolution:
    """Materialised quadruple; ``Y[k]`` for k = 0..K, ``Z[k]``, ``U[k]`` for
    k = 0..K-1 and ``dM[k]`` child-indexed over step k+1."""

    tree: ScenarioTree
    Y: List[np.ndarray]
    Z: List[np.ndarray]
    U: List[np.ndarray]
    dM: List[np.ndarray]
    Uhat: List[np.ndarray] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.tree.N

    def particle(self, i: int) -> "BsdeSolution":
        sl = lambda arrs, ax: [np.take(a, [i], axis=ax) for a in arrs]
        return BsdeSolution(self.tree, sl(self.Y, 1), sl(self.Z, 1), sl(self.U, 1),
                            sl(self.dM, 2), sl(self.Uhat, 1), dict(self.meta))

    def bsde_residual(self, f_values) -> float:
        """Max nodewise |Y_k - Y_{k+1} - f dC + Z dX + (U 1 - Uhat) + dM|.

        ``f_values[k]`` holds f at depth k+1 in child layout (n_k, C, N, d)."""
        worst = 0.0
        tr = self.tree
        for k in range(tr.K):
            st = tr.step(k + 1)
            C = tr.C[k]
            Yc = self.Y[k + 1].reshape(-1, C, tr.N, self.Y[k].shape[-1])
            G = Yc + f_values[k] * st.dC
            dM = residual(st, tr.digits(k + 1), G, self.Y[k], self.Z[k], self.U[k], self.Uhat[k])
            worst = max(worst, float(np.max(np.abs(dM - self.dM[k]))))
        return worst


def star_components(sol: BsdeSolution, A: FVPath, beta: float) -> dict:
    """Per-particle weighted norm components of a materialised quadruple."""
    tr = sol.tree
    W = weights(A, beta)
    dA = A.jumps
    N = tr.N
    # S^2: running max of W_k |Y_k|^2 along paths, with W_{K-1} at T
    run = W[0] * np.sum(sol.Y[0] ** 2, axis=-1)
    ay = np.zeros(N)
    for k in range(1, tr.K + 1):
        wk = W[k] if k < tr.K else W[k - 1]
        cur = wk * np.sum(sol.Y[k] ** 2, axis=-1)
        run = np.maximum(np.repeat(run, tr.C[k - 1], axis=0), cur)
        ay += W[k - 1] * dA[k - 1] * (tr.prob(k) @ np.sum(sol.Y[k] ** 2, axis=-1))
    s2 = tr.prob(tr.K) @ run
    z = np.zeros(N)
    u = np.zeros(N)
    m = np.zeros(N)
    for k in range(tr.K):
        st = tr.step(k + 1)
        pk = tr.prob(k)
        zc = sol.Z[k] @ st.c
        z += W[k] * st.dC * (pk @ np.sum(zc ** 2, axis=(-2, -1)))
        if st.J:
            u += W[k] * st.dC * (pk @ tnorm_sq_last(st, sol.U[k]))
        e2 = np.tensordot(tr.q(k + 1), np.sum(sol.dM[k] ** 2, axis=-1), axes=([0], [1]))
        m += W[k] * (pk @ e2)
    return {"S2": s2, "alphaY": ay, "Z": z, "U": u, "M": m}


def norm_star(sol: BsdeSolution, A: FVPath, beta: float, mode: str = "instant"):
    """Total ⋆-norm (summed over particles) and per-particle components.

    ``mode="path"`` uses S2+Z+U+M; ``mode="instant"`` adds the alpha-weighted
    H2 norm of Y."""
    comp = star_components(sol, A, beta)
    keys = ["S2", "Z", "U", "M"] + (["alphaY"] if mode == "instant" else [])
    per = sum(comp[k] for k in keys)
    comp["total"] = per
    return float(per.sum()), comp


# ---------------------------------------------------------------------------
# laws


def law_at(tree: ScenarioTree, values, k: int, particle: int = 0) -> DiscreteLaw:
    """Exact marginal law of a depth-k node process for one particle."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim == 3:
        v = v[:, particle, :]
    return merge_atoms(v, tree.prob(k), "euclid")


def paths_at(tree: ScenarioTree, values_by_depth, k: int, particle: int = 0) -> np.ndarray:
    """Stopped paths (n_k, k+1, d) of a node process for one particle."""
    out = []
    idx = np.arange(tree.sizes[k])
    for j in range(k + 1):
        v = np.asarray(values_by_depth[j], dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim == 3:
            v = v[:, particle, :]
        out.append(v[tree.ancestor(k, idx, j)])
    return np.stack(out, axis=1)


def path_law_at(tree: ScenarioTree, values_by_depth, k: int, particle: int = 0) -> DiscreteLaw:
    return merge_atoms(paths_at(tree, values_by_depth, k, particle), tree.prob(k), "path")
