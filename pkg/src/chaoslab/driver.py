"""Finite-support independent-increment drivers and their compensators.

Every step ``k = 1..K`` carries a joint law of the increment pair
``(dX_o, dX_n)`` (continuous-martingale part and purely discontinuous part)
on finitely many outcomes.  Because increments are independent of the past,
every compensator object is a deterministic function of ``k``:

* ``dC_k = E|dX_o|^2 + E|dX_n|^2``
* ``c_k = (E[dX_o dX_o^T] / dC_k)^{1/2}``
* kernel ``K_k(w) = P(dX_n = w) / dC_k`` for ``w != 0`` and ``zeta_k = P(dX_n != 0)``.

Jump functions ``U`` are arrays whose last axis runs over the nonzero jump
atoms of the step; the value at ``0`` is never used.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateStep, NonPSD, NonZeroMean, ThetaBoundViolated
from .fvcalc import FVPath, stoch_exp

MEAN_TOL = 1e-12


@dataclass(frozen=True)
class IncrementLaw:
    """Finite law on R^m: ``atoms`` has shape (n_atoms, m)."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size != a.shape[0]:
            raise ValueError("one weight per atom")
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.atoms ** 2, axis=1))


def rademacher(sigma: float = 1.0) -> IncrementLaw:
    return IncrementLaw([[-sigma], [sigma]], [0.5, 0.5])


def trinomial(p0: float, sigma: float = 1.0) -> IncrementLaw:
    q = (1.0 - p0) / 2.0
    return IncrementLaw([[-sigma], [0.0], [sigma]], [q, p0, q])


def dirac0(dim: int = 1) -> IncrementLaw:
    return IncrementLaw(np.zeros((1, dim)), [1.0])


@dataclass(frozen=True)
class StepLaw:
    """Joint law of one step's increments on ``B`` outcomes, plus derived data."""

    diff: np.ndarray      # (B, p)
    jump: np.ndarray      # (B, n)
    prob: np.ndarray      # (B,)
    dC: float
    cov: np.ndarray       # (p, p) = E[dX_o dX_o^T]
    c: np.ndarray         # (p, p)
    jump_atoms: np.ndarray  # (J, n) distinct nonzero jump values
    jump_prob: np.ndarray   # (J,)
    atom_index: np.ndarray  # (B,) index into jump_atoms, -1 for a zero jump
    zeta: float

    @property
    def B(self) -> int:
        return self.prob.size

    @property
    def J(self) -> int:
        return self.jump_prob.size

    @property
    def kernel(self) -> np.ndarray:
        return self.jump_prob / self.dC

    @property
    def p0(self) -> float:
        """Mass of the zero jump, 1 - zeta."""
        return float(self.prob[self.atom_index < 0].sum())


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if np.any(vals < -1e-10):
        raise NonPSD(f"eigenvalue {vals.min():.3e}")
    vals = np.where(vals < 1e-12, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def make_step(diff, jump, prob) -> StepLaw:
    diff = np.asarray(diff, dtype=float)
    jump = np.asarray(jump, dtype=float)
    prob = np.asarray(prob, dtype=float)
    if diff.ndim == 1:
        diff = diff[:, None]
    if jump.ndim == 1:
        jump = jump[:, None]
    if not (diff.shape[0] == jump.shape[0] == prob.size):
        raise ValueError("outcome arrays disagree in length")
    if np.any(prob <= 0) or abs(prob.sum() - 1.0) > 1e-12:
        raise ValueError("outcome probabilities must be positive and sum to 1")
    if np.any(np.abs(prob @ diff) > MEAN_TOL) or np.any(np.abs(prob @ jump) > MEAN_TOL):
        raise NonZeroMean("increments must be centred")
    cov = (diff * prob[:, None]).T @ diff
    dC = float(np.trace(cov) + prob @ np.sum(jump ** 2, axis=1))
    if dC <= 0:
        raise DegenerateStep("step carries no quadratic variation")
    c = _sqrtm_psd(cov / dC)
    nonzero = np.any(jump != 0.0, axis=1)
    atoms, inverse = np.unique(jump[nonzero], axis=0, return_inverse=True)
    atom_index = -np.ones(prob.size, dtype=np.int64)
    atom_index[nonzero] = np.asarray(inverse).ravel()
    jprob = np.zeros(atoms.shape[0])
    np.add.at(jprob, atom_index[nonzero], prob[nonzero])
    return StepLaw(diff, jump, prob, dC, cov, c, atoms.reshape(-1, jump.shape[1]),
                   jprob, atom_index, float(jprob.sum()))


def product_step(diff_law: IncrementLaw, jump_law: IncrementLaw) -> StepLaw:
    """Independent pair: outcome ``a * n_jump + b`` for diff atom a, jump atom b."""
    for law in (diff_law, jump_law):
        if np.any(np.abs(law.mean()) > MEAN_TOL):
            raise NonZeroMean("increment law has nonzero mean")
    na, nb = diff_law.atoms.shape[0], jump_law.atoms.shape[0]
    diff = np.repeat(diff_law.atoms, nb, axis=0)
    jump = np.tile(jump_law.atoms, (na, 1))
    prob = np.outer(diff_law.weights, jump_law.weights).ravel()
    return make_step(diff, jump, prob)


@dataclass(frozen=True)
class DriverModel:
    times: np.ndarray
    steps: tuple

    @property
    def K(self) -> int:
        return len(self.steps)

    @property
    def p(self) -> int:
        return self.steps[0].diff.shape[1]

    @property
    def n(self) -> int:
        return self.steps[0].jump.shape[1]

    @property
    def dC(self) -> np.ndarray:
        return np.array([s.dC for s in self.steps])

    def C(self) -> FVPath:
        return FVPath.pure_jump(self.dC, self.times)

    def step(self, k: int) -> StepLaw:
        """Law of the increment over ``(t_{k-1}, t_k]``, ``k = 1..K``."""
        return self.steps[k - 1]

    def jump_function(self, k: int, fn) -> np.ndarray:
        """Evaluate ``fn(w)`` on the nonzero jump atoms of step k, shape (J, ...)."""
        st = self.step(k)
        return np.array([fn(w) for w in st.jump_atoms], dtype=float)

    def simulate_terminal(self, n_paths: int, rng: np.random.Generator):
        """Terminal values (X_o_T, X_n_T) of ``n_paths`` independent paths."""
        xo = np.zeros((n_paths, self.p))
        xn = np.zeros((n_paths, self.n))
        for st in self.steps:
            idx = rng.choice(st.B, size=n_paths, p=st.prob)
            xo += st.diff[idx]
            xn += st.jump[idx]
        return xo, xn


def build_driver(times, diff_laws: Sequence[IncrementLaw],
                 jump_laws: Sequence[IncrementLaw]) -> DriverModel:
    times = np.asarray(times, dtype=float)
    if len(diff_laws) != times.size - 1 or len(jump_laws) != times.size - 1:
        raise ValueError("need one diff law and one jump law per step")
    steps = tuple(product_step(d, j) for d, j in zip(diff_laws, jump_laws))
    _check_dims(steps)
    return DriverModel(times, steps)


def build_driver_joint(times, joint_laws) -> DriverModel:
    """Driver from per-step joint outcome lists ``(diff, jump, prob)``."""
    times = np.asarray(times, dtype=float)
    steps = tuple(make_step(*jl) for jl in joint_laws)
    if len(steps) != times.size - 1:
        raise ValueError("need one joint law per step")
    _check_dims(steps)
    return DriverModel(times, steps)


def _check_dims(steps):
    p, n = steps[0].diff.shape[1], steps[0].jump.shape[1]
    for s in steps:
        if s.diff.shape[1] != p or s.jump.shape[1] != n:
            raise ValueError("increment dimensions change across steps")


_PRESET = re.compile(r"^\s*(\w+)\s*(?:\(([^)]*)\))?\s*$")


def preset_law(spec: str) -> IncrementLaw:
    """Parse ``rademacher``, ``rademacher(s)``, ``trinomial(p0)``, ``trinomial(p0,s)``, ``zero``."""
    m = _PRESET.match(spec)
    if not m:
        raise ValueError(f"bad law preset {spec!r}")
    name, args = m.group(1), m.group(2)
    vals = [float(x) for x in args.split(",")] if args else []
    if name == "rademacher":
        return rademacher(*vals)
    if name == "trinomial":
        return trinomial(*vals)
    if name == "zero":
        return dirac0()
    raise ValueError(f"unknown law preset {name!r}")


def preset_driver(name: str, K: int, dt: float = 1.0, sigma: float = 1.0,
                  jump: Optional[str] = None) -> DriverModel:
    """Named driver presets: ``rademacher``, ``trinomial(p0)``, ``jumponly``."""
    times = dt * np.arange(K + 1)
    if name == "jumponly":
        diff, jl = dirac0(), IncrementLaw([[-sigma], [sigma]], [0.5, 0.5])
    else:
        m = _PRESET.match(name)
        if not m:
            raise ValueError(f"bad driver preset {name!r}")
        if m.group(1) == "rademacher":
            diff = rademacher(sigma)
        elif m.group(1) == "trinomial":
            p0 = float(m.group(2)) if m.group(2) else 0.5
            diff = trinomial(p0, sigma)
        else:
            raise ValueError(f"unknown driver preset {name!r}")
        jl = preset_law(jump) if jump else dirac0()
    return build_driver(times, [diff] * K, [jl] * K)


# ---------------------------------------------------------------------------
# jump-side operators; ``u`` has the jump atoms on its last axis


def hat(st: StepLaw, u) -> np.ndarray:
    """U-hat = sum over nonzero atoms of U(w) P(w)."""
    u = np.asarray(u, dtype=float)
    if st.J == 0:
        return np.zeros(u.shape[:-1])
    return u @ st.jump_prob


def _kint(st: StepLaw, u):
    return u @ st.kernel if st.J else np.zeros(np.shape(u)[:-1])


def tnorm_sq_last(st: StepLaw, u) -> np.ndarray:
    """[[U]]^2 with atoms on the last axis and values on the axis before it."""
    u = np.asarray(u, dtype=float)
    if st.J == 0:
        return np.zeros(u.shape[:-2])
    h = hat(st, u)[..., None]
    first = np.sum((u - h) ** 2 @ st.kernel, axis=-1)
    ki = _kint(st, u)
    second = (1.0 - st.zeta) * st.dC * np.sum(ki ** 2, axis=-1)
    return first + second


def gamma_last(st: StepLaw, u, theta) -> np.ndarray:
    """Gamma(U) with atoms on the last axis of ``u``; ``theta`` has shape (J,)."""
    u = np.asarray(u, dtype=float)
    if st.J == 0:
        return np.zeros(u.shape[:-1])
    theta = np.asarray(theta, dtype=float)
    th = theta - theta @ st.jump_prob
    first = (u - hat(st, u)[..., None]) @ (th * st.kernel)
    second = (1.0 - st.zeta) * st.dC * _kint(st, u) * (theta @ st.kernel)
    return first + second


def check_theta(st: StepLaw, theta, tol: float = 1e-12):
    theta = np.asarray(theta, dtype=float)
    if st.J and np.any(np.abs(theta) > np.linalg.norm(st.jump_atoms, axis=1) + tol):
        raise ThetaBoundViolated("|Theta(w)| must not exceed |w|")


def default_theta(st: StepLaw, coord: int = 0) -> np.ndarray:
    return st.jump_atoms[:, coord].copy() if st.J else np.zeros(0)


def _as_last(u):
    """Public layout is (J,) or (J, d); move atoms to the last axis."""
    u = np.asarray(u, dtype=float)
    return u if u.ndim == 1 else np.moveaxis(u, 0, -1)


def hat_u(model: DriverModel, k: int, u) -> np.ndarray:
    return hat(model.step(k), _as_last(u))


def gamma_eval(model: DriverModel, k: int, u, theta) -> np.ndarray:
    st = model.step(k)
    check_theta(st, theta)
    return gamma_last(st, _as_last(u), theta)


def tnorm_sq(model: DriverModel, k: int, u) -> float:
    ul = _as_last(u)
    if ul.ndim == 1:
        ul = ul[None, :]
    return float(tnorm_sq_last(model.step(k), ul))


def validate_driver_orthogonality(model: DriverModel, tol: float = 1e-12) -> bool:
    """E[dX_o | dX_n = w] = 0 for every nonzero jump atom of every step."""
    for st in model.steps:
        for j in range(st.J):
            sel = st.atom_index == j
            cm = st.prob[sel] @ st.diff[sel] / st.jump_prob[j]
            if np.any(np.abs(cm) > tol):
                return False
    return True


# ---------------------------------------------------------------------------
# Lipschitz data


@dataclass(frozen=True)
class LipschitzCoeffs:
    """Step functions (scalars or one value per step) of the Lipschitz bound."""

    r: object = 0.0
    theta_o: object = 0.0
    theta_nat: object = 0.0
    theta_star: object = 0.0

    def alpha2(self, K: int) -> np.ndarray:
        vals = [np.broadcast_to(np.asarray(v, dtype=float), (K,))
                for v in (self.r, self.theta_o, self.theta_nat, self.theta_star)]
        if any(np.any(v < 0) for v in vals):
            raise ValueError("Lipschitz coefficients must be nonnegative")
        r, to, tn, ts = vals
        return np.maximum.reduce([np.sqrt(r), to, tn, np.sqrt(ts)])

    def as_dict(self):
        conv = lambda v: np.asarray(v, dtype=float).tolist()
        return {"r": conv(self.r), "theta_o": conv(self.theta_o),
                "theta_nat": conv(self.theta_nat), "theta_star": conv(self.theta_star)}


@dataclass(frozen=True)
class ADatum:
    A: FVPath
    phi: float
    alpha2: np.ndarray

    def lambda_beta(self, beta: float) -> float:
        return float(stoch_exp(self.A.scaled(beta))[-1])

    def weights(self, beta: float) -> np.ndarray:
        """W_k = E(beta A)_{t_k}, k = 0..K; the left limit at t_k is W_{k-1}."""
        return stoch_exp(self.A.scaled(beta))


def lipschitz_to_A(coeffs: LipschitzCoeffs, model: DriverModel) -> ADatum:
    a2 = coeffs.alpha2(model.K)
    dA = a2 * model.dC
    A = FVPath.pure_jump(dA, model.times)
    phi = float(dA.max()) if dA.size else 0.0
    return ADatum(A, phi, a2)
