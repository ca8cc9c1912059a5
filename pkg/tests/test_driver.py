import math

import numpy as np
import pytest

from chaoslab import driver as D
from chaoslab.errors import DegenerateStep, NonZeroMean, ThetaBoundViolated


def example_model(K=1):
    return D.build_driver(np.arange(K + 1.0), [D.rademacher()] * K,
                          [D.trinomial(0.5)] * K)


def _gamma_oracle(atoms, probs, dC, zeta, u, theta):
    # direct sums over the nonzero jump atoms
    K = [p / dC for p in probs]
    uh = sum(ui * p for ui, p in zip(u, probs))
    th = sum(t * p for t, p in zip(theta, probs))
    first = sum((ui - uh) * (t - th) * k for ui, t, k in zip(u, theta, K))
    second = (1 - zeta) * dC * sum(ui * k for ui, k in zip(u, K)) * sum(t * k for t, k in zip(theta, K))
    return first + second


def _tnorm_oracle(probs, dC, zeta, u):
    K = [p / dC for p in probs]
    uh = sum(ui * p for ui, p in zip(u, probs))
    return (sum((ui - uh) ** 2 * k for ui, k in zip(u, K))
            + (1 - zeta) * dC * sum(ui * k for ui, k in zip(u, K)) ** 2)


def test_build_driver_example():
    m = example_model()
    st = m.step(1)
    assert st.dC == pytest.approx(1.5, abs=1e-15)
    assert st.zeta == pytest.approx(0.5, abs=1e-15)
    assert st.c[0, 0] == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    assert np.allclose(st.kernel, [1 / 6, 1 / 6], atol=1e-15)
    assert st.kernel.sum() * st.dC == pytest.approx(st.zeta, abs=1e-15)


def test_no_jump_driver():
    m = D.build_driver([0.0, 1.0], [D.rademacher()], [D.dirac0()])
    st = m.step(1)
    assert st.dC == 1.0 and st.zeta == 0.0 and st.J == 0


def test_build_driver_errors():
    bad = D.IncrementLaw([[-0.9], [1.1]], [0.5, 0.5])
    with pytest.raises(NonZeroMean):
        D.build_driver([0.0, 1.0], [bad], [D.dirac0()])
    with pytest.raises(DegenerateStep):
        D.build_driver([0.0, 1.0], [D.dirac0()], [D.dirac0()])


def test_hat_u_examples():
    m = example_model()
    atoms = m.step(1).jump_atoms[:, 0]
    assert D.hat_u(m, 1, atoms) == pytest.approx(0.0, abs=1e-15)
    assert D.hat_u(m, 1, atoms ** 2) == pytest.approx(0.5, abs=1e-15)
    nj = D.build_driver([0.0, 1.0], [D.rademacher()], [D.dirac0()])
    assert np.all(D.hat_u(nj, 1, np.zeros(0)) == 0.0)


def test_gamma_examples():
    jo = D.preset_driver("jumponly", 1)
    st = jo.step(1)
    w = st.jump_atoms[:, 0]
    assert st.dC == 1.0 and st.zeta == 1.0
    assert D.gamma_eval(jo, 1, w, w) == pytest.approx(1.0, abs=1e-15)
    m = example_model()
    w = m.step(1).jump_atoms[:, 0]
    assert D.gamma_eval(m, 1, w ** 2, w) == pytest.approx(0.0, abs=1e-15)
    assert D.gamma_eval(m, 1, np.zeros(2), w) == 0.0
    with pytest.raises(ThetaBoundViolated):
        D.gamma_eval(m, 1, w, 2 * w)


def test_tnorm_examples():
    m = example_model()
    w = m.step(1).jump_atoms[:, 0]
    assert D.tnorm_sq(m, 1, w) == pytest.approx(1 / 3, abs=1e-15)
    nj = D.build_driver([0.0, 1.0], [D.rademacher()], [D.dirac0()])
    assert D.tnorm_sq(nj, 1, np.zeros(0)) == 0.0
    # constant on a zeta = 1 driver: only the hat-centred part vanishes
    jo = D.preset_driver("jumponly", 1)
    assert D.tnorm_sq(jo, 1, np.array([2.0, 2.0])) == pytest.approx(0.0, abs=1e-15)


def test_gamma_and_tnorm_against_oracle(rng):
    for _ in range(200):
        J = int(rng.integers(1, 5))
        jumps = np.sort(rng.choice(np.arange(1, 9), J, replace=False)).astype(float)
        atoms = np.concatenate([jumps, -jumps, [0.0]]).astype(float)
        p = rng.dirichlet(np.ones(2 * J + 1))
        p[J:2 * J] = p[:J]
        p /= p.sum()
        m = D.build_driver([0.0, 1.0], [D.rademacher(rng.uniform(0.1, 2))],
                           [D.IncrementLaw(atoms[:, None], p)])
        st = m.step(1)
        u = rng.normal(size=st.J)
        theta = st.jump_atoms[:, 0] * rng.uniform(-1, 1, st.J)
        g = _gamma_oracle(st.jump_atoms[:, 0], st.jump_prob, st.dC, st.zeta, u, theta)
        assert D.gamma_eval(m, 1, u, theta) == pytest.approx(g, abs=1e-12)
        t = _tnorm_oracle(st.jump_prob, st.dC, st.zeta, u)
        assert D.tnorm_sq(m, 1, u) == pytest.approx(t, abs=1e-12)
        # Theta itself has tnorm at most 1
        assert D.tnorm_sq(m, 1, theta) <= 1 + 1e-12


def test_orthogonality():
    assert D.validate_driver_orthogonality(example_model(2))
    nj = D.build_driver([0.0, 1.0], [D.rademacher()], [D.dirac0()])
    assert D.validate_driver_orthogonality(nj)
    # four-atom joint law: dX_o has conditional mean 0.5 given the jump +1
    diff = np.array([[1.0], [0.0], [-1.0], [0.0]])
    jump = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    prob = np.array([0.25, 0.25, 0.25, 0.25])
    bad = D.build_driver_joint([0.0, 1.0], [(diff, jump, prob)])
    assert not D.validate_driver_orthogonality(bad)


def test_lipschitz_to_A():
    m = D.build_driver([0.0, 1.0, 2.0], [D.rademacher(math.sqrt(0.5))] * 2, [D.dirac0()] * 2)
    ad = D.lipschitz_to_A(D.LipschitzCoeffs(1, 1, 1, 1), m)
    assert np.allclose(ad.A.jumps, 0.5) and ad.phi == pytest.approx(0.5, abs=1e-15)
    assert ad.lambda_beta(1.0) == pytest.approx(2.25, abs=1e-15)
    z = D.lipschitz_to_A(D.LipschitzCoeffs(), m)
    assert np.all(z.A.jumps == 0) and z.lambda_beta(3.0) == 1.0
    assert D.LipschitzCoeffs(r=4).alpha2(1)[0] == 2.0


def test_total_dC_matches_monte_carlo(rng):
    m = example_model(3)
    xo, xn = m.simulate_terminal(200_000, rng)
    mc = np.sum(xo ** 2, axis=1) + np.sum(xn ** 2, axis=1)
    total = m.dC.sum()
    se = mc.std(ddof=1) / math.sqrt(mc.size)
    assert abs(mc.mean() - total) <= 3 * se
