"""Command line: constants, validate, solve, chaos, rates, selftest.

Exit codes: 0 ok, 1 condition or selftest failure, 2 usage or config error,
3 solver non-convergence, 4 node budget exceeded.
"""
from __future__ import annotations

import argparse
import copy
import io
import json
import math
import os
import sys
import time
import warnings
from importlib import resources
from typing import Optional

import jsonschema
import numpy as np

from . import chaos, fvcalc
from .driver import IncrementLaw, build_driver, lipschitz_to_A, preset_driver, preset_law
from .errors import BudgetExceeded, ChaosLabError, ConfigError, NotConverged
from .scenario import build_tree
from .solver import (OwnPathTerminal, Problem, SolveResult, picard, preset_generator,
                     standard_data_check)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NOCONV, EXIT_BUDGET = 0, 1, 2, 3, 4

DEFAULTS = {
    "driver": {"preset": "rademacher", "dt": 1.0, "sigma": 1.0},
    "generator": {"d": 1},
    "terminal": {"eps": "0"},
    "solver": {"beta_hat": "auto", "tol": 1e-10, "max_iter": 200, "left": False,
               "start": "zero", "dump": False},
    "experiment": {"N": 1, "particle": 0, "q": 6.0, "t_index": 1, "max_reps": 64},
    "output": {"dir": "."},
}


# ---------------------------------------------------------------------------
# config handling


def schema() -> dict:
    return json.loads(resources.files("chaoslab").joinpath("config_schema.json").read_text())


def parse_config(text: str) -> dict:
    """Parse, validate and fill defaults; the result is a plain JSON tree."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config: {exc.message}") from exc
    cfg = copy.deepcopy(raw)
    for block, vals in DEFAULTS.items():
        cfg.setdefault(block, {})
        for key, v in vals.items():
            cfg[block].setdefault(key, v)
    if "steps" in cfg["driver"]:
        cfg["driver"].pop("preset", None)
    jsonschema.validate(cfg, schema())
    return cfg


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _law(spec) -> IncrementLaw:
    if isinstance(spec, str):
        return preset_law(spec)
    atoms = np.asarray(spec["atoms"], dtype=float)
    return IncrementLaw(atoms.reshape(atoms.shape[0], -1), spec["weights"])


def make_driver(cfg: dict):
    dv = cfg["driver"]
    K = dv["K"]
    try:
        if "steps" in dv:
            if len(dv["steps"]) != K:
                raise ConfigError("driver.steps must have K entries")
            times = dv["dt"] * np.arange(K + 1)
            return build_driver(times, [_law(s["diff"]) for s in dv["steps"]],
                                [_law(s["jump"]) for s in dv["steps"]])
        return preset_driver(dv["preset"], K, dv["dt"], dv["sigma"], dv.get("jump"))
    except ConfigError:
        raise
    except (ValueError, ChaosLabError) as exc:
        raise ConfigError(f"driver: {exc}") from exc


def make_generator(cfg: dict):
    try:
        return preset_generator(cfg["generator"]["preset"], cfg["generator"]["d"])
    except ValueError as exc:
        raise ConfigError(f"generator: {exc}") from exc


def make_table(cfg: dict, model) -> np.ndarray:
    """Own-path terminal table over single-particle leaves, or a constant one."""
    tm, d = cfg["terminal"], cfg["generator"]["d"]
    n = int(np.prod([st.B for st in model.steps]))
    if tm["kind"] == "constant":
        if "value" not in tm:
            raise ConfigError("constant terminal needs 'value'")
        return np.full((n, d), float(tm["value"]))
    if "values" in tm:
        v = np.asarray(tm["values"], dtype=float)
        if v.size != n * d:
            raise ConfigError(f"terminal.values needs {n * d} entries")
        return v.reshape(n, d)
    if "seed" not in tm:
        raise ConfigError("own-path terminal needs 'values' or 'seed'")
    return np.random.default_rng(tm["seed"]).normal(size=(n, d))


def theorem_of(cfg: dict, gen, N: int) -> str:
    th = cfg["solver"].get("theorem")
    if th:
        return th
    kind = "MV" if N == 1 and gen.uses_law else "MF"
    return f"{'path' if gen.mode == 'path' else 'instant'}-{kind}"


def beta_of(cfg: dict, model, gen, theorem: str) -> float:
    b = cfg["solver"]["beta_hat"]
    if b != "auto":
        return float(b)
    ad = lipschitz_to_A(gen.lipschitz(model.K, model.p, cfg["generator"]["d"]), model)
    beta = fvcalc.suggest_beta(theorem, ad.phi, ad.A)
    if beta is None:
        raise ConfigError("no beta_hat meets the contraction condition; set solver.beta_hat")
    return float(beta)


def chaos_config(cfg: dict, threads: int = 1) -> chaos.ChaosConfig:
    model = make_driver(cfg)
    gen = make_generator(cfg)
    theorem = cfg["solver"].get("theorem") or ("path-MF" if gen.mode == "path" else "instant-MF")
    beta = beta_of(cfg, model, gen, theorem)
    ex = cfg["experiment"]
    Ns = tuple(ex.get("Ns", [2, 4, 8]))
    return chaos.ChaosConfig(model, gen, make_table(cfg, model), beta, cfg["terminal"]["eps"],
                             Ns, ex.get("seed", 0), cfg["solver"]["left"], threads)


# ---------------------------------------------------------------------------
# output helpers


def fmt(x) -> str:
    """Shortest round-trip decimal; '.' separator regardless of locale."""
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: str, header, rows):
    buf = io.StringIO(newline="")
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(fmt(v) for v in r) + "\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(path: str, obj):
    text = json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _outdir(args, cfg: Optional[dict]) -> str:
    d = args.out or (cfg["output"]["dir"] if cfg else ".")
    os.makedirs(d, exist_ok=True)
    return d


def _threads(n: int) -> int:
    return (os.cpu_count() or 1) if n == 0 else n


# ---------------------------------------------------------------------------
# subcommands


def cmd_constants(args) -> int:
    if args.beta is None or args.phi is None:
        print("constants needs --beta and --phi", file=sys.stderr)
        return EXIT_CONFIG
    if not args.beta > 0 or args.phi < 0:
        print("beta must be > 0 and phi >= 0", file=sys.stderr)
        return EXIT_CONFIG
    b, phi = args.beta, args.phi
    ms, mt = fvcalc.m_star(b, phi), fvcalc.m_tilde(b, phi)
    gs = fvcalc.minimize_over_gamma("star", b, phi)
    gt = fvcalc.minimize_over_gamma("tilde", b, phi)
    rows = [("m_star", ms, gs, abs(ms - gs) / ms), ("m_tilde", mt, gt, abs(mt - gt) / mt)]
    if args.gamma is not None or args.delta is not None:
        if args.gamma is None or args.delta is None or args.gamma <= 0 or args.delta <= 0:
            print("gamma and delta must both be given and positive", file=sys.stderr)
            return EXIT_CONFIG
        if args.gamma == args.delta:
            print("gamma and delta must differ", file=sys.stderr)
            return EXIT_CONFIG
        rows.append(("lambda", fvcalc.lambda_gdp(args.gamma, args.delta, phi), None, None))
    header = ("name", "value", "oracle", "rel_delta")
    print(",".join(header))
    for r in rows:
        print(",".join(fmt(v) for v in r))
    if args.out:
        write_csv(os.path.join(_outdir(args, None), "constants.csv"), header, rows)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    model = make_driver(cfg)
    gen = make_generator(cfg)
    N = cfg["experiment"]["N"]
    th = theorem_of(cfg, gen, N)
    beta = beta_of(cfg, model, gen, th)
    rep, items = standard_data_check(model, gen, beta, th, cfg["generator"]["d"])
    out = {"theorem": th, "beta_hat": beta, "phi": rep.phi, "lambda_beta": rep.lambda_beta,
           "modulus": rep.modulus, "holds": rep.holds, "items": items}
    for it in items:
        print(f"{'ok  ' if it['holds'] else 'FAIL'} {it['name']}")
    print(f"{th}: modulus {rep.modulus:.6g} -> {'holds' if rep.holds else 'fails'}")
    if args.out:
        write_json(os.path.join(_outdir(args, cfg), "validate.json"), out)
    return EXIT_OK if rep.holds else EXIT_FAIL


def _dump_nodes(res: SolveResult) -> dict:
    sol = res.solution
    return {"Y": [y.tolist() for y in sol.Y], "Z": [z.tolist() for z in sol.Z],
            "U": [u.tolist() for u in sol.U], "dM": [m.tolist() for m in sol.dM]}


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    model = make_driver(cfg)
    gen = make_generator(cfg)
    N = cfg["experiment"]["N"]
    th = theorem_of(cfg, gen, N)
    beta = beta_of(cfg, model, gen, th)
    table = make_table(cfg, model)
    tree = build_tree(model, N)
    eps = chaos.EPS_FAMILIES[cfg["terminal"]["eps"]](N)
    law = "none" if not gen.uses_law else ("exact" if N == 1 else "empirical")
    sv = cfg["solver"]
    pb = Problem(tree, gen, OwnPathTerminal(table, model, eps), beta, law=law,
                 left=sv["left"], threads=_threads(args.threads))
    lam = pb.adatum.lambda_beta(beta)
    rep = fvcalc.contraction_condition(th, beta, pb.adatum.phi, lam)
    try:
        x, trace = picard(pb, sv["start"], sv["tol"], sv["max_iter"])
    except NotConverged as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        if exc.trace is not None:
            write_json(os.path.join(_outdir(args, cfg), "trace.json"), exc.trace.as_dict())
        return EXIT_NOCONV
    res = SolveResult(pb, x, trace, rep)
    norms = res.norms()
    out = {"theorem": th, "beta_hat": beta, "modulus": rep.modulus, "holds": rep.holds,
           "N": N, "y0": res.y0, "norms": {k: v for k, v in sorted(norms.items())},
           "trace": trace.as_dict()}
    for i, y in enumerate(res.y0):
        print(f"Y0[{i}] = " + " ".join(fmt(v) for v in y))
    print(f"iterations {trace.iterations}, modulus {rep.modulus:.6g}")
    d = _outdir(args, cfg)
    write_json(os.path.join(d, "solve.json"), out)
    if sv["dump"]:
        write_json(os.path.join(d, "nodes.json"), _dump_nodes(res))
    return EXIT_OK


def cmd_chaos(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["experiment"]["seed"] = args.seed
    cc = chaos_config(cfg, _threads(args.threads))
    part = cfg["experiment"]["particle"]
    if part >= min(cc.Ns):
        raise ConfigError("experiment.particle must be below every N")
    rep = chaos.run_particle_gap(cc, part)
    rows = []
    for r in rep.rows:
        rows.append(("system_gap", r.N, None, cc.K, r.avg_gap, None))
        rows.append(("particle_gap", r.N, None, cc.K, r.particle_gap, None))
    d = _outdir(args, cfg)
    write_csv(os.path.join(d, "chaos.csv"),
              ("experiment", "N", "rep", "t_index", "value", "stderr"), rows)
    gaps = rep.gaps()
    summary = {"beta_hat": cc.beta_hat, "Ns": list(cc.Ns), "gaps": gaps,
               "rows": [r.as_dict() for r in rep.rows],
               "non_increasing": rep.non_increasing(),
               "last_below_first": bool(gaps[-1] < gaps[0]) if len(gaps) > 1 else None}
    write_json(os.path.join(d, "chaos.json"), summary)
    for r in rep.rows:
        print(f"N={r.N} gap={fmt(r.avg_gap)}")
    return EXIT_OK


def cmd_rates(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["experiment"]["seed"] = args.seed
    ex = cfg["experiment"]
    if "seed" not in ex:
        raise ConfigError("rates needs a seed (experiment.seed or --seed)")
    cc = chaos_config(cfg, _threads(args.threads))
    mv = chaos.solve_mv(cc)
    k = ex["t_index"]
    if k > cc.K:
        raise ConfigError("experiment.t_index exceeds K")
    Ns = ex.get("Ns", [2 ** j for j in range(4, 13)])
    res = chaos.rate_experiment(mv, k, Ns, ex["q"], ex["seed"], max_reps=ex["max_reps"])
    rows = [("w2sq", r["N"], r["reps"], k, r["mean"], r["stderr"]) for r in res.rows]
    d = _outdir(args, cfg)
    write_csv(os.path.join(d, "rates.csv"),
              ("experiment", "N", "rep", "t_index", "value", "stderr"), rows)
    summary = dict(res.as_dict(), q=ex["q"], t_index=k, seed=ex["seed"],
                   slope_ok=bool(res.slope is not None and res.slope <= -0.4))
    write_json(os.path.join(d, "rates.json"), summary)
    print(f"slope {fmt(res.slope)} C {fmt(res.C)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def _selftest_checks(fault: bool):
    from . import driver as D, scenario as S, solver as V, transport as T

    def constants():
        return (abs(fvcalc.m_star(1, 0) - (6 * math.sqrt(17) + 35)) < 1e-9 and
                abs(fvcalc.minimize_over_gamma("tilde", 2, 0.1, 2000) / fvcalc.m_tilde(2, 0.1) - 1) < 1e-6)

    def stoch_exp():
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = fvcalc.FVPath(np.arange(6.0), np.zeros(5), rng.uniform(0, 1, 5))
            e = fvcalc.stoch_exp(a) * fvcalc.stoch_exp(-fvcalc.bar_path(a))
            if not np.allclose(e, 1.0, rtol=0, atol=1e-12):
                return False
        return True

    def representation():
        model = preset_driver("rademacher", 1, jump="trinomial(0.5)")
        tree = build_tree(model, 1)
        G = np.random.default_rng(2).normal(size=tree.sizes[1])
        Z, U, Uhat, dm = S.mart_repr(tree, 0, G, 0)
        st = model.step(1)
        dm = dm[:, 0, 0]
        ok = abs(float(st.prob @ (dm * st.diff[:, 0]))) < 1e-12
        for a in range(st.J):
            sel = st.atom_index == a
            ok &= abs(float(st.prob[sel] @ dm[sel])) < 1e-12
        return ok

    def closed_form():
        model = preset_driver("rademacher", 2, sigma=math.sqrt(0.5))
        tree = build_tree(model, 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = V.solve_mckean_vlasov(tree, model, 1.0, preset_generator("mean(1)"), 200.0)
        y0 = float(res.y0[0, 0]) + (1e-6 if fault else 0.0)
        return abs(y0 - 2.25) < 1e-12

    def conservation():
        cc = chaos.standard_config(Ns=(2,))
        return chaos.conservation_check(cc, 2)

    def wasserstein():
        rng = np.random.default_rng(3)
        for _ in range(20):
            xs, ys = rng.normal(size=(4, 1)), rng.normal(size=(4, 1))
            if abs(T.w2_empirical_equal(xs, ys) - T.w2_bruteforce(xs, ys)) > 1e-10:
                return False
        return abs(T.w2_empirical_equal([[0.0], [2.0]], [[1.0], [1.0]]) - 1.0) < 1e-12

    def gamma_lipschitz():
        model = preset_driver("rademacher", 1, jump="trinomial(0.5)")
        st = model.step(1)
        th = D.default_theta(st)
        rng = np.random.default_rng(4)
        for _ in range(100):
            u1, u2 = rng.normal(size=(1, st.J)), rng.normal(size=(1, st.J))
            lhs = (D.gamma_last(st, u1, th) - D.gamma_last(st, u2, th)) ** 2
            if np.any(lhs > 2 * D.tnorm_sq_last(st, u1 - u2) + 1e-12):
                return False
        return True

    return [("constants", constants), ("stochastic exponential", stoch_exp),
            ("representation orthogonality", representation),
            ("gamma lipschitz", gamma_lipschitz), ("wasserstein", wasserstein),
            ("closed-form solve", closed_form), ("conservation", conservation)]


def cmd_selftest(args) -> int:
    fault = args.inject_fault or os.environ.get("CHAOSLAB_SELFTEST_FAULT") == "1"
    t0 = time.perf_counter()
    for name, check in _selftest_checks(fault):
        try:
            ok = bool(check())
        except Exception as exc:                     # noqa: BLE001 - report any failure
            print(f"FAIL {name}: {exc}")
            return EXIT_FAIL
        if not ok:
            print(f"FAIL {name}")
            return EXIT_FAIL
        print(f"ok   {name}")
    print(f"selftest passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chaoslab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides experiment.seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads, 0 = auto")
        return sp

    c = common(sub.add_parser("constants", help="contraction constants"), config=False)
    c.add_argument("--beta", type=float)
    c.add_argument("--phi", type=float)
    c.add_argument("--gamma", type=float)
    c.add_argument("--delta", type=float)
    c.set_defaults(fn=cmd_constants)
    common(sub.add_parser("validate", help="standard-data condition report")).set_defaults(fn=cmd_validate)
    common(sub.add_parser("solve", help="Picard solve")).set_defaults(fn=cmd_solve)
    common(sub.add_parser("chaos", help="mean-field vs McKean-Vlasov gaps")).set_defaults(fn=cmd_chaos)
    common(sub.add_parser("rates", help="empirical W2 rate experiment")).set_defaults(fn=cmd_rates)
    s = common(sub.add_parser("selftest", help="fast invariant checks"), config=False)
    s.add_argument("--inject-fault", action="store_true", help="corrupt one check")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if getattr(args, "threads", 1) < 0:
        print("--threads must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except NotConverged as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
