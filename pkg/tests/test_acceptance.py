"""Acceptance criteria; each test records one PASS/FAIL line."""
import itertools
import math
import os
import subprocess
import sys
import time
import warnings

import numpy as np
from scipy import optimize

from chaoslab import chaos as CH
from chaoslab import cli
from chaoslab import driver as D
from chaoslab import fvcalc as F
from chaoslab import scenario as S
from chaoslab import solver as V
from chaoslab import transport as T
from helpers import random_driver, random_fv
from test_driver import _gamma_oracle, _tnorm_oracle
from test_scenario import check_node

N_CRITERIA = 13
RESULTS = {}
CONFIGS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def record(n, title, ok, detail=""):
    line = f"[{n:2d}] {'PASS' if ok else 'FAIL'} {title}" + (f": {detail}" if detail else "")
    RESULTS[n] = line
    print(line)
    assert ok, line


def _quiet(fn, *a, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fn(*a, **kw)


# ---------------------------------------------------------------------------
# 1


def _objective(kind, g, beta, phi):
    """f-coefficient of the combined a-priori bound with delta = beta."""
    lam = (1 + g * phi) ** 2 / (g * (beta - g))
    w = 9 * beta if kind == "star" else 9 * beta + 2
    return 8 / g + 8 * phi + 9 / beta + w * lam


def _oracle_inf(kind, beta, phi):
    grid = np.linspace(0, beta, 200_002)[1:-1]
    vals = _objective(kind, grid, beta, phi)
    i = int(np.argmin(vals))
    res = optimize.minimize_scalar(lambda g: _objective(kind, g, beta, phi),
                                   bounds=(grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]),
                                   method="bounded", options={"xatol": 1e-14})
    return min(float(vals[i]), float(res.fun))


def test_01_constants():
    t0 = time.perf_counter()
    e1 = abs(F.m_star(1, 0) - (6 * math.sqrt(17) + 35))
    e2 = abs(F.m_tilde(1, 0) - (2 * math.sqrt(209) + 39))
    e3 = abs(F.m_star(1, 0) - 59.7386338)
    worst = 0.0
    for beta in (0.5, 1, 2, 10, 100):
        for phi in (0, 0.01, 0.1, 1, 10):
            for kind, fn in (("star", F.m_star), ("tilde", F.m_tilde)):
                v = fn(beta, phi)
                worst = max(worst, abs(_oracle_inf(kind, beta, phi) / v - 1),
                            abs(F.minimize_over_gamma(kind, beta, phi) / v - 1))
    dt = time.perf_counter() - t0
    ok = e1 <= 1e-9 and e2 <= 1e-9 and e3 <= 1e-7 and worst <= 1e-6 and dt < 5
    record(1, "constants", ok, f"closed-form err {max(e1, e2):.1e}, m_tilde(1,0)="
           f"{F.m_tilde(1, 0):.10f}, grid rel err {worst:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2


def _exp_loop(drift, jumps):
    out = [1.0]
    for dr, j in zip(drift, jumps):
        out.append(out[-1] * math.exp(dr) * (1.0 + j))
    return np.array(out)


def test_02_stochastic_exponential():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    fails = []
    for it in range(1000):
        a = random_fv(rng)
        ea = F.stoch_exp(a)
        # (ii) inverse through the bar path
        if not F.close(ea * F.stoch_exp(-F.bar_path(a)), np.ones_like(ea)):
            fails.append(("ii", it))
        # (iii) 0 <= E(A) <= exp(A)
        if np.any(ea < 0) or np.any(ea > np.exp(a.values()) * (1 + 1e-12) + 1e-12):
            fails.append(("iii", it))
        # (iv) monotonicity both ways
        up = random_fv(rng, K=a.K, nondecreasing=True)
        down = F.FVPath(up.times, -rng.uniform(0, 0.5, up.K), -rng.uniform(0, 1, up.K))
        if np.any(np.diff(F.stoch_exp(up)) < 0) or np.any(np.diff(F.stoch_exp(down)) > 0):
            fails.append(("iv", it))
        # (v) product rule against the loop formula
        b = random_fv(rng, K=a.K)
        b = F.FVPath(a.times, b.drift, b.jumps)
        lhs = ea * F.stoch_exp(b)
        rhs = _exp_loop(a.drift + b.drift, a.jumps + b.jumps + a.jumps * b.jumps)
        if not (F.close(lhs, rhs) and F.product_identity_check(a, b)):
            fails.append(("v", it))
        # (vi) jumps and integral form of the bar path
        bar = F.bar_path(a)
        if not (F.close(bar.jumps, a.jumps / (1 + a.jumps)) and F.close(bar.drift, a.drift)
                and F.close(bar.values(), F.bar_path_via_correction(a).values())):
            fails.append(("vi", it))
        # (vii) ratio of exponentials
        dl, gm = rng.uniform(0, 3, 2)
        til = F.tilde_path(up, dl, gm)
        ok7 = (F.close(F.stoch_exp(til), F.stoch_exp(up.scaled(dl)) / F.stoch_exp(up.scaled(gm)))
               and F.close(til.jumps, (dl - gm) * up.jumps / (1 + gm * up.jumps))
               and np.all(til.jumps > -1))
        if not ok7:
            fails.append(("vii", it))
    dt = time.perf_counter() - t0
    record(2, "stochastic-exponential suite", not fails and dt < 5,
           f"{len(fails)} failures over 1000 paths, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 3


def _norm_zu_gap(rng, model, tree):
    A = F.FVPath.pure_jump(rng.uniform(0, 0.5, model.K), model.times)
    W = S.weights(A, rng.uniform(0.1, 3))
    lhs = rhs = 0.0
    for k in range(model.K):
        st = model.step(k + 1)
        n = tree.sizes[k]
        Z = rng.normal(size=(n, 1, 1, model.p))
        U = rng.normal(size=(n, 1, 1, st.J))
        inc = S.diff_term(st, Z) + S.jump_term(st, U, D.hat(st, U))
        lhs += W[k] * tree.prob(k) @ (inc[:, 0, :, 0] ** 2 @ st.prob)
        rhs += W[k] * st.dC * tree.prob(k) @ (np.sum((Z @ st.c) ** 2, axis=(1, 2, 3))
                                              + D.tnorm_sq_last(st, U)[:, 0])
    return abs(lhs - rhs) / max(1.0, abs(rhs))


def test_03_orthogonal_decomposition():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    bad = 0
    for it in range(500):
        multi = it % 2 == 1
        K = int(rng.integers(2, 4)) if multi else 1
        N = int(rng.integers(1, 3 if multi else 4))
        model = random_driver(rng, K, p=int(rng.integers(1, 3)), n=int(rng.integers(1, 3)))
        tree = S.build_tree(model, N)
        k = int(rng.integers(0, K))
        d = int(rng.integers(1, 3))
        G = rng.normal(size=(tree.sizes[k], tree.C[k], N, d))
        Z, U, Uhat, dM = S.mart_repr(tree, k, G)
        nodes = rng.choice(tree.sizes[k], size=min(3, tree.sizes[k]), replace=False)
        try:
            for a in nodes:
                check_node(model.step(k + 1), N, G[a], Z[a], U[a], Uhat[a], dM[a], tol=1e-10)
        except AssertionError:
            bad += 1
        if _norm_zu_gap(rng, model, S.build_tree(model, 1)) > 1e-10:
            bad += 1
    dt = time.perf_counter() - t0
    record(3, "orthogonal decomposition", bad == 0 and dt < 30,
           f"{bad} failures over 500 instances, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 4


def test_04_gamma_lipschitz():
    rng = np.random.default_rng(4)
    worst = math.inf
    mismatch = 0.0
    for _ in range(1000):
        J = int(rng.integers(1, 5))
        jumps = np.sort(rng.choice(np.arange(1, 9), J, replace=False)).astype(float)
        atoms = np.concatenate([jumps, -jumps, [0.0]])
        p = rng.dirichlet(np.ones(2 * J + 1))
        p[J:2 * J] = p[:J]
        p /= p.sum()
        m = D.build_driver([0.0, 1.0], [D.rademacher(rng.uniform(0.1, 2))],
                           [D.IncrementLaw(atoms[:, None], p)])
        st = m.step(1)
        theta = st.jump_atoms[:, 0] * rng.uniform(-1, 1, st.J)
        u1, u2 = rng.normal(size=(2, st.J)) * 10.0 ** rng.uniform(-2, 2)
        lhs = (D.gamma_eval(m, 1, u1, theta) - D.gamma_eval(m, 1, u2, theta)) ** 2
        rhs = 2 * D.tnorm_sq(m, 1, u1 - u2)
        g1 = _gamma_oracle(st.jump_atoms[:, 0], st.jump_prob, st.dC, st.zeta, u1, theta)
        g2 = _gamma_oracle(st.jump_atoms[:, 0], st.jump_prob, st.dC, st.zeta, u2, theta)
        t12 = _tnorm_oracle(st.jump_prob, st.dC, st.zeta, u1 - u2)
        mismatch = max(mismatch, abs(lhs - (g1 - g2) ** 2) / max(1, lhs),
                       abs(rhs - 2 * t12) / max(1, rhs))
        worst = min(worst, rhs - lhs)
    record(4, "gamma Lipschitz", worst >= -1e-12 and mismatch <= 1e-10,
           f"min slack {worst:.2e}, oracle mismatch {mismatch:.1e}")


# ---------------------------------------------------------------------------
# 5


def test_05_apriori():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst = math.inf
    oracle_err = 0.0
    for _ in range(100):
        K = int(rng.integers(1, 4))
        model = random_driver(rng, K, p=1, n=1)
        tree = S.build_tree(model, 1)
        d = int(rng.integers(1, 3))
        xi = rng.normal(size=(tree.sizes[K], d)) * rng.uniform(0.1, 3)
        fs = [rng.normal(size=(tree.sizes[k], d)) * rng.uniform(0, 3) for k in range(1, K + 1)]
        A = F.FVPath(model.times, np.zeros(K), rng.uniform(0.05, 2.0, K) * model.dC)
        phi = float(A.jumps.max()) * rng.uniform(1.0, 1.5)
        gamma, delta = rng.uniform(0.05, 20, 2)
        out = V.apriori_verify(tree, model, xi, fs, A, gamma, delta, phi)
        worst = min(worst, out["min_slack"])
        # independent alpha-Y: y_k = E[xi + sum_{j>k} f_j dC_j | F_k]
        nK = tree.sizes[K]
        lifted = [np.repeat(fs[j - 1], nK // tree.sizes[j], axis=0) * model.dC[j - 1]
                  for j in range(1, K + 1)]
        pK = tree.prob(K)
        W = np.concatenate([[1.0], np.cumprod(1 + delta * A.jumps)])
        ay = 0.0
        for k in range(1, K + 1):
            n_k = tree.sizes[k]
            per = nK // n_k
            acc = xi + sum(lifted[j - 1] for j in range(k + 1, K + 1))
            num = (pK[:, None] * acc).reshape(n_k, per, d).sum(axis=1)
            den = pK.reshape(n_k, per).sum(axis=1)
            yk = num / den[:, None]
            ay += W[k - 1] * A.jumps[k - 1] * (tree.prob(k) @ np.sum(yk ** 2, axis=1))
        oracle_err = max(oracle_err, abs(ay - out["alpha_y"]["lhs"]) / max(1, ay))
    dt = time.perf_counter() - t0
    record(5, "a-priori estimates", worst >= -1e-10 and oracle_err <= 1e-10 and dt < 60,
           f"min slack {worst:.3g}, lhs oracle err {oracle_err:.1e}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 6


def _problems():
    """(name, problem, theorem) for the shipped configs and a few random ones."""
    out = []
    for name in sorted(os.listdir(CONFIGS)):
        cfg = cli.load_config(os.path.join(CONFIGS, name))
        model, gen = cli.make_driver(cfg), cli.make_generator(cfg)
        N = cfg["experiment"]["N"]
        th = cli.theorem_of(cfg, gen, N)
        try:
            beta = cli.beta_of(cfg, model, gen, th)
        except Exception:                            # noqa: BLE001 - no admissible beta
            continue
        law = "none" if not gen.uses_law else ("exact" if N == 1 else "empirical")
        term = V.OwnPathTerminal(cli.make_table(cfg, model), model)
        out.append((name, V.Problem(S.build_tree(model, N), gen, term, beta, law=law), th))
    cc = CH.standard_config(Ns=(2,))
    for N in (2, 3):
        term = V.OwnPathTerminal(cc.table, cc.model)
        out.append((f"standard N={N}", V.Problem(S.build_tree(cc.model, N), cc.gen, term,
                                                 cc.beta_hat, law="empirical"), "instant-MF"))
    rng = np.random.default_rng(6)
    for i, spec in enumerate(["linear(0.5)", "mean(0.5)", "saturating-mean", "w2ref(0.3)"]):
        small = D.IncrementLaw([[-0.05], [0.05]], [0.5, 0.5])
        model = D.build_driver([0.0, 1.0, 2.0], [D.trinomial(0.4, 0.05)] * 2, [small] * 2)
        gen = V.preset_generator(spec)
        ad = D.lipschitz_to_A(gen.lipschitz(2, 1, 1), model)
        beta = F.suggest_beta("instant-MV", ad.phi)
        term = V.OwnPathTerminal(rng.normal(size=(36, 1)), model)
        law = "exact" if gen.uses_law else "none"
        out.append((f"random {spec}", V.Problem(S.build_tree(model, 1), gen, term, beta,
                                                law=law), "instant-MV"))
    return out


def test_06_picard_contraction():
    checked, bad = 0, []
    for name, pb, th in _problems():
        rep, _ = V.standard_data_check(pb.tree.model, pb.gen, pb.beta_hat, th, pb.d)
        if not rep.holds:
            continue
        checked += 1
        x1, t1 = V.picard(pb, "zero")
        x2, t2 = V.picard(pb, "terminal")
        gap = max(float(np.max(np.abs(a - b))) for a, b in zip(x1.Y, x2.Y))
        ratio = max(t1.max_ratio(), t2.max_ratio())
        if not (t1.converged and t2.converged and max(t1.iterations, t2.iterations) <= 200
                and ratio <= rep.modulus * (1 + 1e-6) and gap <= 1e-9):
            bad.append(f"{name} (ratio {ratio:.3g} vs {rep.modulus:.3g}, gap {gap:.1e})")
    record(6, "Picard contraction", checked > 0 and not bad,
           f"{checked} configs checked" + (f"; failing: {', '.join(bad)}" if bad else ""))


# ---------------------------------------------------------------------------
# 7


def test_07_closed_forms():
    rng = np.random.default_rng(7)
    model = random_driver(rng, 3, p=1, n=1)
    tree = S.build_tree(model, 1)
    xi = rng.normal(size=(tree.sizes[3], 1))
    zero = _quiet(V.solve_standard, tree, model, xi, V.preset_generator("zero"), 10.0)
    e_zero = 0.0
    pK = tree.prob(3)
    for k in range(3):
        per = tree.sizes[3] // tree.sizes[k]
        ce = ((pK[:, None] * xi).reshape(-1, per, 1).sum(axis=1)
              / pK.reshape(-1, per).sum(axis=1)[:, None])
        e_zero = max(e_zero, float(np.max(np.abs(zero.iterate.Y[k][:, 0, :] - ce))))
    kappa = 0.7
    const = _quiet(V.solve_standard, tree, model, xi, V.preset_generator(f"constant({kappa})"), 10.0)
    e_const = abs(float(const.y0[0, 0]) - (float(pK @ xi[:, 0]) + kappa * model.dC.sum()))
    m2 = D.preset_driver("rademacher", 2, sigma=math.sqrt(0.5))
    mv = _quiet(V.solve_mckean_vlasov, S.build_tree(m2, 1), m2, 1.0, V.preset_generator("mean(1)"), 200.0)
    e_mv = abs(float(mv.y0[0, 0]) - 2.25)
    ok = e_zero <= 1e-12 and e_const <= 1e-12 and e_mv <= 1e-12
    record(7, "closed-form solves", ok,
           f"zero {e_zero:.1e}, constant {e_const:.1e}, MV mean {e_mv:.1e}")


# ---------------------------------------------------------------------------
# 8


def test_08_conservation():
    cfg = CH.standard_config(Ns=(2,))
    mv = CH.solve_mv(cfg)
    errs = {}
    for N in (2, 3, 4):
        joint = CH._joint(cfg, N, "exact", 0.0)
        errs[N] = CH.conservation_error(mv, joint)
    ok = all(e <= 1e-10 for e in errs.values())
    record(8, "conservation of solutions", ok,
           ", ".join(f"N={N} {e:.1e}" for N, e in errs.items()))


# ---------------------------------------------------------------------------
# 9


def test_09_chaos_desk_scale():
    t0 = time.perf_counter()
    cfg = CH.standard_config(Ns=(2, 4, 8, 12))
    rep = CH.run_system_gap(cfg)
    g = rep.gaps()
    dt = time.perf_counter() - t0
    ok = rep.non_increasing() and g[2] < g[0] and dt < 600
    record(9, "propagation of chaos", ok,
           "gaps " + ", ".join(f"N={r.N} {r.avg_gap:.4e}" for r in rep.rows) + f", {dt:.0f}s")


# ---------------------------------------------------------------------------
# 10


def _perm_w2(xs, ys):
    n = len(xs)
    best = min(sum(np.sum((xs[i] - ys[s[i]]) ** 2) for i in range(n))
               for s in itertools.permutations(range(n)))
    return math.sqrt(best / n)


def test_10_wasserstein():
    rng = np.random.default_rng(10)
    e1 = 0.0
    for _ in range(500):
        n, m = rng.integers(1, 8, 2)
        p = T.DiscreteLaw(rng.normal(size=(n, 1)), rng.dirichlet(np.ones(n)))
        q = T.DiscreteLaw(rng.normal(size=(m, 1)), rng.dirichlet(np.ones(m)))
        e1 = max(e1, abs(T.w2_discrete(p, q) - T.w2_1d(p, q)))
    e2 = 0.0
    for N in range(1, 7):
        for _ in range(10):
            xs, ys = rng.normal(size=(2, N, 2))
            e2 = max(e2, abs(T.w2_empirical_equal(xs, ys) - _perm_w2(xs, ys)))
    coup = 0
    for _ in range(1000):
        N = int(rng.integers(1, 8))
        xs, ys = rng.normal(size=(2, N, 2))
        direct = T.w2_empirical_equal(xs, ys) ** 2 <= np.mean(np.sum((xs - ys) ** 2, axis=1)) + 1e-12
        coup += not (direct and T.empirical_coupling_bound_check(xs, ys))
    tri = 0.0
    for _ in range(1000):
        laws = [T.DiscreteLaw(rng.normal(size=(k, 2)), rng.dirichlet(np.ones(k)))
                for k in rng.integers(1, 6, 3)]
        a, b, c = laws
        tri = max(tri, T.w2_discrete(a, c) - T.w2_discrete(a, b) - T.w2_discrete(b, c))
    ok = e1 <= 1e-10 and e2 <= 1e-10 and coup == 0 and tri <= 1e-10
    record(10, "Wasserstein", ok, f"1d err {e1:.1e}, brute-force err {e2:.1e}, "
           f"coupling failures {coup}, triangle excess {tri:.1e}")


# ---------------------------------------------------------------------------
# 11


def test_11_rates():
    t0 = time.perf_counter()
    cfg = cli.load_config(os.path.join(CONFIGS, "rates.json"))
    cc = cli.chaos_config(cfg)
    mv = CH.solve_mv(cc)
    ex = cfg["experiment"]
    res = CH.rate_experiment(mv, ex["t_index"], ex["Ns"], ex["q"], ex["seed"],
                             max_reps=ex["max_reps"])
    Ns = np.array([r["N"] for r in res.rows], dtype=float)
    means = np.array([r["mean"] for r in res.rows])
    under = (res.C is not None and math.isfinite(res.C)
             and bool(np.all(means <= res.C * (Ns ** -0.5 + Ns ** (-2 / 3)) * (1 + 1e-12))))
    dt = time.perf_counter() - t0
    ok = (not res.degenerate and res.slope <= -0.4 and under and Ns[0] == 16
          and Ns[-1] == 4096 and dt < 600)
    record(11, "rates", ok, f"slope {res.slope:.3f}, C {res.C:.3f}, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 12


def test_12_lambda_qt():
    rng = np.random.default_rng(12)
    bad, err = 0, 0.0
    for _ in range(50):
        K = int(rng.integers(1, 4))
        model = D.preset_driver(rng.choice(["rademacher", "trinomial(0.3)"]), K,
                                sigma=rng.uniform(0.02, 0.2))
        n = int(np.prod([st.B for st in model.steps]))
        gen = V.preset_generator(f"{rng.choice(['mean', 'saturating-mean'])}({rng.uniform(0.2, 1.5)})")
        beta = float(rng.uniform(200, 2000))
        res = CH.solve_mv(CH.ChaosConfig(model, gen, rng.normal(size=(n, 1)), beta))
        A = res.problem.adatum.A
        q = float(rng.uniform(2.5, 8))
        out = CH.lambda_qt(res, A, beta, q)
        W = np.concatenate([[1.0], np.cumprod(1 + beta * A.jumps)])
        tree = res.problem.tree
        lam = ay = 0.0
        for k in range(1, K + 1):
            y = np.abs(res.solution.Y[k][:, 0, 0])
            pk = tree.prob(k)
            lam += (pk @ y ** q) ** (2 / q) * (W[k] - W[k - 1]) / beta
            ay += W[k - 1] * A.jumps[k - 1] * (pk @ y ** 2)
        err = max(err, abs(lam - out["lambda_qt"]) / lam, abs(ay - out["alpha_y"]) / max(ay, 1e-300))
        bad += not (out["alpha_y"] <= out["lambda_qt"] and ay <= lam * (1 + 1e-12))
    record(12, "Lambda_qT dominance", bad == 0 and err <= 1e-10,
           f"{bad} violations over 50 instances, oracle err {err:.1e}")


# ---------------------------------------------------------------------------
# 13


def _cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "chaoslab", *args], capture_output=True,
                          text=True, timeout=600, env=env)


def test_13_cli_determinism(tmp_path):
    same = True
    for cmd, cfg, files in (("chaos", "standard_chaos.json", ("chaos.csv", "chaos.json")),
                            ("rates", "rates.json", ("rates.csv", "rates.json")),
                            ("solve", "zero_generator.json", ("solve.json",))):
        outs = []
        for tag in ("a", "b"):
            d = tmp_path / f"{cmd}-{tag}"
            r = _cli(cmd, "--config", os.path.join(CONFIGS, cfg), "--out", str(d))
            same &= r.returncode == 0
            outs.append([(d / f).read_bytes() if (d / f).exists() else None for f in files])
        same &= outs[0] == outs[1] and None not in outs[0]
    env = {k: v for k, v in os.environ.items() if k != "CHAOSLAB_SELFTEST_FAULT"}
    t0 = time.perf_counter()
    r = _cli("selftest", env=env)
    dt = time.perf_counter() - t0
    record(13, "CLI determinism and selftest", same and r.returncode == 0 and dt < 60,
           f"byte-identical {same}, selftest rc {r.returncode} in {dt:.1f}s")
