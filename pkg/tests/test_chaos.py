import math

import numpy as np
import pytest

from chaoslab import chaos as CH
from chaoslab import driver as D
from chaoslab import solver as V
from chaoslab.errors import ConfigError, QTooSmall


@pytest.fixture(scope="module")
def cfg():
    return CH.standard_config(Ns=(2, 4, 8))


@pytest.fixture(scope="module")
def mv(cfg):
    return CH.solve_mv(cfg)


@pytest.mark.parametrize("N", [2, 3, 4])
def test_conservation(cfg, N):
    assert CH.conservation_check(cfg, N)


def test_conservation_detects_corruption(cfg):
    assert not CH.conservation_check(cfg, 2, corrupt=True)


def test_conservation_with_jumps():
    model = D.preset_driver("trinomial(0.4)", 2, sigma=0.1, jump="rademacher")
    cfg = CH.ChaosConfig(model, V.preset_generator("saturating-mean(0.5)"),
                         np.random.default_rng(3).normal(size=(36, 1)), 400.0)
    assert CH.conservation_check(cfg, 2)
    with pytest.raises(ConfigError):
        V.OwnPathTerminal(np.zeros((9, 1)), model)


def test_gap_zero_without_interaction():
    """A law-free generator with eps = 0 decouples the particles exactly."""
    cfg = CH.standard_config(Ns=(2, 3), gen=V.preset_generator("linear(0.5)"))
    rep = CH.run_system_gap(cfg)
    assert max(rep.gaps()) <= 1e-20


def test_gap_non_increasing(cfg):
    rep = CH.run_system_gap(cfg)
    g = rep.gaps()
    assert rep.non_increasing()
    assert g[-1] < g[0]
    # exchangeability: every particle sees the same gap
    for N in (2, 3):
        row = CH.gap_at(cfg, N, particle=N - 1)
        assert row.particle_gap == pytest.approx(row.avg_gap, rel=1e-9)


def test_perturbation_bound():
    cfg = CH.standard_config(Ns=(2,), gen=V.preset_generator("linear(0.5)"), eps="1/N")
    for N in (2, 3):
        out = CH.perturbation_bound(cfg, N)
        assert out["gap"] > 0 and out["slack"] >= 0
    with pytest.raises(ValueError):
        CH.perturbation_bound(CH.standard_config(Ns=(2,)), 2)


def test_sample_mv_values(mv):
    a = CH.sample_mv_values(mv, 2, 50, 5, 0)
    b = CH.sample_mv_values(mv, 2, 50, 5, 0)
    c = CH.sample_mv_values(mv, 2, 50, 5, 1)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    big = CH.sample_mv_values(mv, 2, 200_000, 1)
    exact = mv.problem.tree.prob(2) @ mv.solution.Y[2][:, 0, 0]
    sd = math.sqrt(mv.problem.tree.prob(2) @ (mv.solution.Y[2][:, 0, 0] - exact) ** 2)
    assert abs(big.mean() - exact) <= 5 * sd / math.sqrt(200_000)


def test_envelope():
    assert CH.envelope(100, 1, 6) == pytest.approx(0.1 + 100 ** (-2 / 3), rel=1e-12)
    assert CH.envelope(100, 1, 6) == pytest.approx(0.14642, abs=1e-5)
    assert CH.envelope(100, 4, 6) == pytest.approx(0.1 * math.log(101) + 100 ** (-2 / 3))
    assert CH.envelope(100, 8, 6) == pytest.approx(100 ** -0.25 + 100 ** (-2 / 3))


def test_rate_experiment_small(mv):
    r = CH.rate_experiment(mv, 2, [16, 64, 256], q=6, seed=3, max_reps=16)
    assert not r.degenerate
    assert r.slope < 0
    env = CH.envelope(np.array([16, 64, 256]), 1, 6, r.C)
    assert all(row["mean"] <= e * (1 + 1e-12) for row, e in zip(r.rows, env))
    with pytest.raises(QTooSmall):
        CH.rate_experiment(mv, 2, [16], q=2)


def test_lambda_qt_dominance(rng):
    for _ in range(10):
        model = D.preset_driver("rademacher", int(rng.integers(1, 4)), sigma=rng.uniform(0.02, 0.2))
        table = rng.normal(size=(2 ** model.K, 1))
        gen = V.preset_generator(f"mean({rng.uniform(0.2, 1.5)})")
        beta = float(rng.uniform(200, 2000))
        cfg = CH.ChaosConfig(model, gen, table, beta)
        res = CH.solve_mv(cfg)
        A = res.problem.adatum.A
        q = float(rng.uniform(2.5, 8))
        out = CH.lambda_qt(res, A, beta, q)
        assert out["holds"] and out["alpha_y"] <= out["lambda_qt"] * (1 + 1e-12)
    with pytest.raises(QTooSmall):
        CH.lambda_qt(res, A, beta, 2.0)


def test_cor64(cfg):
    rows = CH.cor64_check(cfg, [2, 4], 2)
    assert [r["N"] for r in rows] == [2, 4]
    for r in rows:
        assert r["mean_w2sq"] >= 0 and r["sup_w2"] >= 0
    assert rows[1]["sup_w2"] <= rows[0]["sup_w2"] + 1e-12


def test_eps_families():
    cfg = CH.standard_config(Ns=(2,), eps="1/sqrt(N)")
    assert cfg.eps_of(4) == 0.5
    assert CH.EPS_FAMILIES["1/N"](8) == 0.125
    assert CH.EPS_FAMILIES["0"](8) == 0.0
