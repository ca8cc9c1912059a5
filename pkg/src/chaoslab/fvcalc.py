"""Deterministic finite-variation calculus on a time grid.

An :class:`FVPath` is a function ``A`` on grid points ``t_0 = 0 < ... < t_K``
made of a continuous increment on each interval ``(t_{k-1}, t_k]`` (linear in
time between grid points) and a jump at each ``t_k``, ``k >= 1``.  The module
also hosts the explicit contraction constants and a numerical oracle for them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import optimize

from .errors import EqualExponents, JumpAtMinusOne, UnknownTheorem

ABS_TOL = 1e-12
REL_TOL = 1e-9


@dataclass(frozen=True)
class FVPath:
    """Grid-indexed finite-variation path.

    Attributes
    ----------
    times : (K+1,) strictly increasing grid, ``times[0]`` is the origin.
    drift : (K,) continuous increment over ``(t_{k-1}, t_k]``.
    jumps : (K,) jump at ``t_k`` for ``k = 1..K``.
    a0 : initial value ``A_0``.
    """

    times: np.ndarray
    drift: np.ndarray
    jumps: np.ndarray
    a0: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        d = np.asarray(self.drift, dtype=float)
        j = np.asarray(self.jumps, dtype=float)
        if t.ndim != 1 or t.size < 1:
            raise ValueError("times must be a non-empty 1-d array")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if d.shape != (t.size - 1,) or j.shape != (t.size - 1,):
            raise ValueError("drift and jumps need one entry per interval")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "drift", d)
        object.__setattr__(self, "jumps", j)
        object.__setattr__(self, "a0", float(self.a0))

    @property
    def K(self) -> int:
        return self.drift.size

    def values(self) -> np.ndarray:
        """A at every grid point."""
        inc = np.concatenate([[0.0], np.cumsum(self.drift + self.jumps)])
        return self.a0 + inc

    def continuous_part(self) -> np.ndarray:
        """A^c at grid points (starting from 0)."""
        return np.concatenate([[0.0], np.cumsum(self.drift)])

    def scaled(self, c: float) -> "FVPath":
        return FVPath(self.times, c * self.drift, c * self.jumps, c * self.a0)

    def __add__(self, other: "FVPath") -> "FVPath":
        _check_same_grid(self, other)
        return FVPath(self.times, self.drift + other.drift,
                      self.jumps + other.jumps, self.a0 + other.a0)

    def __neg__(self) -> "FVPath":
        return self.scaled(-1.0)

    def __sub__(self, other: "FVPath") -> "FVPath":
        return self + (-other)

    def is_nondecreasing(self) -> bool:
        return bool(np.all(self.drift >= 0) and np.all(self.jumps >= 0))

    def is_nonincreasing(self) -> bool:
        return bool(np.all(self.drift <= 0) and np.all(self.jumps <= 0))

    @classmethod
    def pure_jump(cls, jumps, times=None) -> "FVPath":
        jumps = np.asarray(jumps, dtype=float)
        if times is None:
            times = np.arange(jumps.size + 1, dtype=float)
        return cls(times, np.zeros_like(jumps), jumps)

    @classmethod
    def zero(cls, times) -> "FVPath":
        times = np.asarray(times, dtype=float)
        z = np.zeros(times.size - 1)
        return cls(times, z, z.copy())


def _check_same_grid(a: FVPath, b: FVPath):
    if a.times.shape != b.times.shape or not np.array_equal(a.times, b.times):
        raise ValueError("paths live on different grids")


def bracket(a: FVPath, b: FVPath) -> FVPath:
    """Quadratic covariation [A, B] = sum of products of jumps."""
    _check_same_grid(a, b)
    z = np.zeros(a.K)
    return FVPath(a.times, z, a.jumps * b.jumps)


def stoch_exp(a: FVPath) -> np.ndarray:
    """E(A) at grid points: exp(A^c_t) * prod_{s<=t} (1 + dA_s)."""
    factors = np.exp(a.drift) * (1.0 + a.jumps)
    return np.concatenate([[1.0], np.cumprod(factors)])


def stoch_exp_left(a: FVPath) -> np.ndarray:
    """Left limits E(A)_{t_k-} for k = 1..K."""
    e = stoch_exp(a)
    return e[:-1] * np.exp(a.drift)


def sde_residual(a: FVPath) -> np.ndarray:
    """E(A)_t - 1 - int_(0,t] E(A)_{s-} dA_s at grid points.

    The continuous part is linear inside each interval, so the integral of
    E against it over ``(t_{k-1}, t_k)`` is ``E_{k-1} (exp(drift_k) - 1)``.
    """
    e = stoch_exp(a)
    cont = e[:-1] * np.expm1(a.drift)
    jump = stoch_exp_left(a) * a.jumps
    integral = np.concatenate([[0.0], np.cumsum(cont + jump)])
    return e - 1.0 - integral


def _require_no_minus_one(jumps):
    if np.any(jumps == -1.0):
        raise JumpAtMinusOne("a jump equals -1")


def bar_path(a: FVPath) -> FVPath:
    """A-bar = A - sum (dA)^2 / (1 + dA); its jumps are dA / (1 + dA)."""
    _require_no_minus_one(a.jumps)
    return FVPath(a.times, a.drift.copy(), a.jumps / (1.0 + a.jumps), a.a0)


def bar_path_via_correction(a: FVPath) -> FVPath:
    """Same path built from the subtraction form, used as a cross-check."""
    _require_no_minus_one(a.jumps)
    corr = a.jumps ** 2 / (1.0 + a.jumps)
    return FVPath(a.times, a.drift.copy(), a.jumps - corr, a.a0)


def tilde_path(a: FVPath, delta: float, gamma: float) -> FVPath:
    """A-tilde for exponents (delta, gamma), with E(delta A)/E(gamma A) = E(A-tilde)."""
    ga = a.scaled(gamma)
    _require_no_minus_one(ga.jumps)
    gbar = bar_path(ga)
    da = a.scaled(delta)
    out = da - gbar - bracket(da, gbar)
    if delta >= 0 and gamma >= 0 and a.is_nondecreasing():
        if np.any(out.jumps <= -1.0):
            raise JumpAtMinusOne("tilde path has a jump <= -1")
    return out


def close(x, y) -> bool:
    """Grid-wise comparison: 1e-12 scaled by max(1, |y|) up to 1e6, relative 1e-9 beyond."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mag = np.abs(y)
    tol = np.where(mag <= 1e6, ABS_TOL * np.maximum(1.0, mag), REL_TOL * mag)
    return bool(np.all(np.abs(x - y) <= tol))


def product_identity_check(a: FVPath, b: FVPath) -> bool:
    """E(A) E(B) = E(A + B + [A, B]) on the grid."""
    lhs = stoch_exp(a) * stoch_exp(b)
    rhs = stoch_exp(a + b + bracket(a, b))
    return close(lhs, rhs)


# ---------------------------------------------------------------------------
# contraction constants


def lambda_gdp(gamma: float, delta: float, phi: float) -> float:
    """(1 + gamma phi)^2 / (gamma |delta - gamma|)."""
    if gamma == delta:
        raise EqualExponents("gamma and delta must differ")
    return (1.0 + gamma * phi) ** 2 / (gamma * abs(delta - gamma))


def m_star(beta: float, phi: float) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    s = 6.0 * math.sqrt(17.0)
    return (s + 35.0) / beta + (s + 26.0) * phi


def m_tilde(beta: float, phi: float) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    r = 2.0 * math.sqrt(2.0 / beta + 9.0) * math.sqrt(2.0 / beta + 17.0)
    return (r + 4.0 / beta + 35.0) / beta + (r + 4.0 / beta + 26.0) * phi


def g_star(gamma, beta, phi):
    """Objective whose infimum over gamma in (0, beta) is m_star."""
    g = np.asarray(gamma, dtype=float)
    return (9.0 / beta + 8.0 * (1.0 + g * phi) / g
            + 9.0 * beta / (beta - g) * (1.0 + g * phi) ** 2 / g)


def g_tilde(gamma, beta, phi):
    """Objective whose infimum over gamma in (0, beta) is m_tilde."""
    g = np.asarray(gamma, dtype=float)
    return (9.0 / beta + 8.0 * (1.0 + g * phi) / g
            + (2.0 + 9.0 * beta) / (beta - g) * (1.0 + g * phi) ** 2 / g)


def minimize_over_gamma(kind: str, beta: float, phi: float,
                        grid_size: int = 100_000, return_argmin: bool = False):
    """Grid search over gamma in (0, beta) refined by golden-section search."""
    if grid_size < 1000:
        raise ValueError("grid_size must be at least 1000")
    fn = {"star": g_star, "tilde": g_tilde}[kind]
    grid = np.linspace(0.0, beta, grid_size + 2)[1:-1]
    vals = fn(grid, beta, phi)
    i = int(np.argmin(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    best_x, best_v = grid[i], float(vals[i])
    if 0 < i < grid.size - 1:
        res = optimize.minimize_scalar(lambda g: float(fn(g, beta, phi)),
                                       bracket=(lo, grid[i], hi), method="golden",
                                       tol=1e-12)
        if res.fun < best_v:
            best_x, best_v = float(res.x), float(res.fun)
    return (best_v, best_x) if return_argmin else best_v


# ---------------------------------------------------------------------------
# contraction conditions

THEOREMS = ("path-MV", "instant-MV", "path-MF", "instant-MF", "chaos-PC9", "chaos-PC8'")
_NEEDS_LAMBDA = {"path-MV", "path-MF", "chaos-PC9"}


@dataclass(frozen=True)
class ContractionReport:
    theorem_id: str
    beta_hat: float
    phi: float
    lambda_beta: Optional[float]
    modulus: float
    holds: bool

    def as_dict(self):
        return {"theorem_id": self.theorem_id, "beta_hat": self.beta_hat,
                "phi": self.phi, "lambda_beta": self.lambda_beta,
                "modulus": self.modulus, "holds": self.holds}


def contraction_modulus(theorem_id: str, beta_hat: float, phi: float,
                        lambda_beta: Optional[float] = None) -> float:
    if theorem_id not in THEOREMS:
        raise UnknownTheorem(theorem_id)
    if beta_hat <= 0 or phi < 0:
        raise ValueError("need beta_hat > 0 and phi >= 0")
    if theorem_id in _NEEDS_LAMBDA:
        if lambda_beta is None or lambda_beta <= 0:
            raise ValueError(f"{theorem_id} needs a positive lambda_beta")
    if theorem_id in ("path-MV", "path-MF"):
        return max(2.0, 2.0 * lambda_beta / beta_hat) * m_star(beta_hat, phi)
    if theorem_id == "chaos-PC9":
        return max(2.0, 3.0 * lambda_beta / beta_hat) * m_star(beta_hat, phi)
    if theorem_id in ("instant-MV", "instant-MF"):
        return 2.0 * m_tilde(beta_hat, phi)
    return 3.0 * m_tilde(beta_hat, phi)


def contraction_condition(theorem_id: str, beta_hat: float, phi: float,
                          lambda_beta: Optional[float] = None) -> ContractionReport:
    mod = contraction_modulus(theorem_id, beta_hat, phi, lambda_beta)
    return ContractionReport(theorem_id, float(beta_hat), float(phi),
                             None if lambda_beta is None else float(lambda_beta),
                             float(mod), bool(mod < 1.0))


LambdaSource = Union[None, FVPath, Callable[[float], float]]


def _lambda_fn(src: LambdaSource) -> Callable[[float], Optional[float]]:
    if src is None:
        return lambda b: None
    if isinstance(src, FVPath):
        return lambda b: float(stoch_exp(src.scaled(b))[-1])
    return src


def suggest_beta(theorem_id: str, phi: float, lambda_beta_of_beta: LambdaSource = None,
                 grid=None) -> Optional[float]:
    """Smallest beta_hat on a log grid for which the condition holds, else None."""
    if grid is None:
        grid = np.geomspace(1e-2, 1e6, 8001)
    lam = _lambda_fn(lambda_beta_of_beta)
    for b in grid:
        lb = lam(float(b))
        if theorem_id in _NEEDS_LAMBDA and lb is None:
            raise ValueError(f"{theorem_id} needs a lambda source")
        if contraction_modulus(theorem_id, float(b), phi, lb) < 1.0:
            return float(b)
    return None
