"""Propagation-of-chaos experiments.

Gap experiments solve the N-particle mean-field system exactly on the joint
tree and compare it with the McKean-Vlasov solution lifted to the same tree.
The lift is itself a Picard solve on the joint tree whose measure argument is
frozen to the per-level values of the single-particle McKean-Vlasov solution;
by conservation of solutions it coincides with the lift node by node.

Rate experiments draw i.i.d. copies of the McKean-Vlasov state from the
single-particle tree and never build a joint tree.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import fvcalc
from .driver import DriverModel, preset_driver
from .errors import QTooSmall
from .scenario import ScenarioTree, build_tree, law_at, weights
from .solver import (Generator, OwnPathTerminal, Problem, SolveResult, diff_components,
                     mv_level_stats, picard, preset_generator, star_total)
from .transport import DiscreteLaw, merge_atoms, w2_discrete

EPS_FAMILIES = {
    "0": lambda N: 0.0,
    "1/N": lambda N: 1.0 / N,
    "1/sqrt(N)": lambda N: 1.0 / math.sqrt(N),
}


@dataclass
class ChaosConfig:
    model: DriverModel
    gen: Generator
    table: np.ndarray                 # xi^i = table[own leaf]
    beta_hat: float
    eps: str = "0"
    Ns: Sequence[int] = (2, 4, 8)
    seed: int = 0
    left: bool = False
    threads: int = 1

    @property
    def K(self) -> int:
        return self.model.K

    @property
    def d(self) -> int:
        return np.asarray(self.table).reshape(np.asarray(self.table).shape[0], -1).shape[1]

    def eps_of(self, N: int) -> float:
        return EPS_FAMILIES[self.eps](N)


def standard_config(Ns=(2, 4, 8, 12), sigma: float = math.sqrt(0.004), e: float = 1.0,
                    K: int = 2, seed: int = 7, eps: str = "0", gen: Optional[Generator] = None,
                    theorem: str = "instant-MF") -> ChaosConfig:
    """Binary diffusion driver, d = 1, mean interaction, random own-path terminals,
    beta_hat from the smallest grid value meeting the contraction condition."""
    model = preset_driver("rademacher", K, sigma=sigma)
    gen = preset_generator(f"mean({e})") if gen is None else gen
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(2 ** K, 1))
    lc = gen.lipschitz(K, model.p, 1)
    from .driver import lipschitz_to_A
    ad = lipschitz_to_A(lc, model)
    beta = fvcalc.suggest_beta(theorem, ad.phi, ad.A)
    if beta is None:
        raise ValueError("no beta_hat meets the contraction condition for this config")
    return ChaosConfig(model, gen, table, beta, eps, tuple(Ns), seed)


# ---------------------------------------------------------------------------
# solves


def solve_mv(cfg: ChaosConfig) -> SolveResult:
    tree = build_tree(cfg.model, 1)
    term = OwnPathTerminal(cfg.table, cfg.model, 0.0)
    pb = Problem(tree, cfg.gen, term, cfg.beta_hat,
                 law="exact" if cfg.gen.uses_law else "none", left=cfg.left)
    x, tr = picard(pb)
    return SolveResult(pb, x, tr)


def _joint(cfg: ChaosConfig, N: int, law: str, eps: float, fixed=None,
           tree: Optional[ScenarioTree] = None) -> SolveResult:
    tree = build_tree(cfg.model, N) if tree is None else tree
    term = OwnPathTerminal(cfg.table, cfg.model, eps)
    if not cfg.gen.uses_law:
        law, fixed = "none", None
    pb = Problem(tree, cfg.gen, term, cfg.beta_hat, law=law, fixed=fixed,
                 left=cfg.left, threads=cfg.threads)
    x, tr = picard(pb)
    return SolveResult(pb, x, tr)


def solve_meanfield_cfg(cfg: ChaosConfig, N: int, tree=None) -> SolveResult:
    return _joint(cfg, N, "empirical", cfg.eps_of(N), tree=tree)


def solve_lifted_mv(cfg: ChaosConfig, N: int, mv: Optional[SolveResult] = None,
                    tree=None) -> SolveResult:
    mv = solve_mv(cfg) if mv is None else mv
    return _joint(cfg, N, "fixed", 0.0, fixed=mv_level_stats(mv), tree=tree)


@dataclass
class GapRow:
    N: int
    avg_gap: float
    particle_gap: float
    components: Dict[str, float]
    iterations: int

    def as_dict(self):
        return {"N": self.N, "avg_gap": self.avg_gap, "particle_gap": self.particle_gap,
                "components": self.components, "iterations": self.iterations}


@dataclass
class ChaosReport:
    rows: List[GapRow] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def gaps(self) -> List[float]:
        return [r.avg_gap for r in self.rows]

    def non_increasing(self, rtol: float = 0.0) -> bool:
        g = self.gaps()
        return all(b <= a * (1 + rtol) for a, b in zip(g, g[1:]))


def gap_at(cfg: ChaosConfig, N: int, particle: int = 0,
           mv: Optional[SolveResult] = None) -> GapRow:
    tree = build_tree(cfg.model, N)
    mf = solve_meanfield_cfg(cfg, N, tree)
    lift = solve_lifted_mv(cfg, N, mv, tree)
    comp = diff_components(mf.problem, mf.iterate, lift.iterate, lift.problem)
    per = star_total(comp, cfg.gen.mode)
    return GapRow(N, float(per.mean()), float(per[particle]),
                  {k: float(v.mean()) for k, v in comp.items()},
                  mf.trace.iterations)


def run_system_gap(cfg: ChaosConfig, Ns: Optional[Sequence[int]] = None) -> ChaosReport:
    """Averaged star-norm gap (1/N) sum_i ||mean-field_i - McKean-Vlasov_i||^2 per N."""
    Ns = cfg.Ns if Ns is None else Ns
    mv = solve_mv(cfg)
    rep = ChaosReport()
    for N in Ns:
        rep.rows.append(gap_at(cfg, N, 0, mv))
    rep.extra["beta_hat"] = cfg.beta_hat
    return rep


def run_particle_gap(cfg: ChaosConfig, i: int = 0, Ns=None) -> ChaosReport:
    Ns = cfg.Ns if Ns is None else Ns
    mv = solve_mv(cfg)
    rep = ChaosReport()
    for N in Ns:
        rep.rows.append(gap_at(cfg, N, i, mv))
    rep.extra["particle"] = i
    return rep


def conservation_check(cfg: ChaosConfig, N: int, tol: float = 1e-10,
                       corrupt: bool = False) -> bool:
    """Single-tree McKean-Vlasov solution equals the joint-tree one per particle."""
    mv = solve_mv(cfg)
    tree = build_tree(cfg.model, N)
    joint = _joint(cfg, N, "exact", 0.0, tree=tree)
    if corrupt:
        joint.iterate.Y[0] = joint.iterate.Y[0] + 1e-6
    return conservation_error(mv, joint) <= tol


def conservation_error(mv: SolveResult, joint: SolveResult) -> float:
    tree = joint.problem.tree
    s_mv, s_j = mv.solution, joint.solution
    worst = 0.0
    for i in range(tree.N):
        for k in range(tree.K + 1):
            own = tree.own_index(k, np.arange(tree.sizes[k]), i)
            worst = max(worst, float(np.max(np.abs(s_j.Y[k][:, i] - s_mv.Y[k][own, 0]))))
            if k == tree.K:
                continue
            worst = max(worst, float(np.max(np.abs(s_j.Z[k][:, i] - s_mv.Z[k][own, 0]))))
            if s_j.U[k].size:
                worst = max(worst, float(np.max(np.abs(s_j.U[k][:, i] - s_mv.U[k][own, 0]))))
            dig = tree.digits(k + 1)[:, i].astype(np.int64)
            ref = s_mv.dM[k][own][:, dig, 0]
            worst = max(worst, float(np.max(np.abs(s_j.dM[k][:, :, i] - ref))))
    return worst


def perturbation_bound(cfg: ChaosConfig, N: int) -> dict:
    """Averaged gap versus the terminal-perturbation bound for a law-free generator."""
    if cfg.gen.uses_law:
        raise ValueError("bound applies to generators without measure argument")
    tree = build_tree(cfg.model, N)
    mf = solve_meanfield_cfg(cfg, N, tree)
    lift = solve_lifted_mv(cfg, N, None, tree)
    comp = diff_components(mf.problem, mf.iterate, lift.iterate, lift.problem)
    gap = float(star_total(comp, cfg.gen.mode).mean())
    pb = mf.problem
    K = tree.K
    C = tree.C[K - 1]
    R = 0.0
    for lo, hi in tree.chunks(K - 1):
        a = mf.problem.terminal.values(tree, lo * C, hi * C)
        b = lift.problem.terminal.values(tree, lo * C, hi * C)
        R += float(tree.prob(K, lo * C, hi * C) @ np.sum((a - b) ** 2, axis=(1, 2)))
    R *= pb.W[K - 1] / N
    b_ = cfg.beta_hat
    phi = pb.adatum.phi
    mod = fvcalc.contraction_modulus("instant-MF" if cfg.gen.mode == "instant" else "path-MF",
                                     b_, phi, pb.adatum.lambda_beta(b_))
    bound = (26 + 2 / b_ + (9 * b_ + 2) * phi) / (1 - mod) * R if mod < 1 else math.inf
    return {"gap": gap, "R": R, "bound": bound, "slack": bound - gap}


# ---------------------------------------------------------------------------
# sampling and rates


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def sample_mv_values(mv: SolveResult, k: int, N: int, seed: int, *key: int) -> np.ndarray:
    """N i.i.d. draws of Y_{t_k} from root-to-depth-k walks on the single tree."""
    tree = mv.problem.tree
    rng = _rng(seed, N, *key)
    idx = np.zeros(N, dtype=np.int64)
    for s in range(1, k + 1):
        st = tree.step(s)
        o = rng.choice(st.B, size=N, p=st.prob)
        idx = idx * st.B + o
    return mv.solution.Y[k][idx, 0, :]


def envelope(N, d: int, q: float, C: float = 1.0):
    """Fournier-Guillin envelope for E W2^2 of an N-sample empirical measure."""
    N = np.asarray(N, dtype=float)
    tail = N ** (-(q - 2.0) / q)
    if d < 4:
        head = N ** -0.5
    elif d == 4:
        head = N ** -0.5 * np.log(1.0 + N)
    else:
        head = N ** (-2.0 / d)
    return C * (head + tail)


@dataclass
class RateResult:
    rows: List[dict]
    slope: Optional[float]
    C: Optional[float]
    degenerate: bool

    def as_dict(self):
        return {"rows": self.rows, "slope": self.slope, "C": self.C,
                "degenerate": self.degenerate}


def rate_experiment(mv: SolveResult, k: int, Ns: Sequence[int], q: float = 6.0,
                    seed: int = 0, min_reps: int = 8, max_reps: int = 64,
                    rel_se: float = 0.05) -> RateResult:
    """Mean W2^2 between the empirical law of N i.i.d. copies and the exact law."""
    if q <= 2:
        raise QTooSmall("q must exceed 2")
    exact = law_at(mv.problem.tree, mv.solution.Y[k], k)
    d = exact.atoms.shape[1]
    rows = []
    for N in Ns:
        vals = []
        while True:
            rep = len(vals)
            xs = sample_mv_values(mv, k, N, seed, rep)
            emp = merge_atoms(xs, np.full(N, 1.0 / N))
            vals.append(w2_discrete(emp, exact) ** 2)
            if rep + 1 >= max_reps:
                break
            if rep + 1 >= min_reps:
                m = float(np.mean(vals))
                se = float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
                if m == 0.0 or se < rel_se * m:
                    break
        m = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        rows.append({"N": int(N), "mean": m, "stderr": se, "reps": len(vals)})
    means = np.array([r["mean"] for r in rows])
    if exact.size == 1 or np.any(means <= 0):
        return RateResult(rows, None, None, True)
    Ns_arr = np.array([r["N"] for r in rows], dtype=float)
    sel = slice(1, None) if len(rows) > 2 else slice(None)
    slope = float(np.polyfit(np.log(Ns_arr[sel]), np.log(means[sel]), 1)[0])
    C = float(np.max(means / envelope(Ns_arr, d, q)))
    return RateResult(rows, slope, C, False)


def lambda_qt(mv: SolveResult, A, beta_hat: float, q: float) -> dict:
    """Lambda_{q,T} = (1/beta) sum_k (E|Y_k|^q)^{2/q} dE(beta A)_k and the alpha-Y norm."""
    if q <= 2:
        raise QTooSmall("q must exceed 2")
    tree = mv.problem.tree
    W = weights(A, beta_hat)
    dW = np.diff(W)
    lam = 0.0
    ay = 0.0
    for k in range(1, tree.K + 1):
        y = np.linalg.norm(mv.solution.Y[k][:, 0, :], axis=-1)
        pk = tree.prob(k)
        lam += (pk @ y ** q) ** (2.0 / q) * dW[k - 1] / beta_hat
        ay += W[k - 1] * A.jumps[k - 1] * (pk @ y ** 2)
    return {"lambda_qt": float(lam), "alpha_y": float(ay), "holds": bool(ay <= lam * (1 + 1e-12) + 1e-300)}


def cor64_check(cfg: ChaosConfig, Ns: Sequence[int], k: int) -> List[dict]:
    """E W2^2(empirical particle measure at depth k, exact MV law) and the sup over
    grid times of W2 between particle 0's law and the MV law."""
    mv = solve_mv(cfg)
    out = []
    for N in Ns:
        tree = build_tree(cfg.model, N)
        mf = solve_meanfield_cfg(cfg, N, tree)
        sol = mf.solution
        exact = law_at(mv.problem.tree, mv.solution.Y[k], k)
        pk = tree.prob(k)
        ew = 0.0
        for a in range(tree.sizes[k]):
            emp = merge_atoms(sol.Y[k][a], np.full(N, 1.0 / N))
            ew += pk[a] * w2_discrete(emp, exact) ** 2
        sup = 0.0
        for j in range(tree.K + 1):
            lj = law_at(tree, sol.Y[j], j, 0)
            ej = law_at(mv.problem.tree, mv.solution.Y[j], j)
            sup = max(sup, w2_discrete(lj, ej))
        out.append({"N": int(N), "t_index": k, "mean_w2sq": float(ew), "sup_w2": float(sup)})
    return out
