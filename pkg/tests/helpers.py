"""Random instance generators shared by the test modules."""
import numpy as np

from chaoslab import driver as D
from chaoslab.fvcalc import FVPath


def random_fv(rng, K=None, nondecreasing=False, drift=True, low=-0.9):
    """Random grid path; jumps stay away from -1."""
    K = int(rng.integers(1, 12)) if K is None else K
    times = np.concatenate([[0.0], np.cumsum(rng.uniform(0.1, 1.0, K))])
    lo = 0.0 if nondecreasing else low
    jumps = rng.uniform(lo, 1.5, K)
    dr = rng.uniform(lo, 0.5, K) if drift else np.zeros(K)
    return FVPath(times, dr, jumps)


def centred_law(rng, n_atoms, dim):
    atoms = rng.normal(size=(n_atoms, dim))
    w = rng.dirichlet(np.ones(n_atoms))
    return D.IncrementLaw(atoms - w @ atoms, w)


def symmetric_jump_law(rng, n_pairs, dim=1):
    """Atoms 0 and +-w_j with symmetric weights."""
    w = rng.uniform(0.2, 2.0, size=(n_pairs, dim))
    pw = rng.dirichlet(np.ones(n_pairs + 1))
    atoms = np.concatenate([np.zeros((1, dim)), w, -w])
    probs = np.concatenate([[pw[0]], pw[1:] / 2, pw[1:] / 2])
    return D.IncrementLaw(atoms, probs)


def random_driver(rng, K, p=1, n=1, jump="random"):
    """Product-law driver with random centred diffusion and jump laws."""
    diffs, jumps = [], []
    for _ in range(K):
        diffs.append(centred_law(rng, int(rng.integers(2, 4)), p))
        kind = rng.choice(["none", "symmetric", "centred"]) if jump == "random" else jump
        if kind == "none":
            jumps.append(D.dirac0(n))
        elif kind == "symmetric":
            jumps.append(symmetric_jump_law(rng, int(rng.integers(1, 3)), n))
        else:
            jumps.append(centred_law(rng, int(rng.integers(2, 4)), n))
    return D.build_driver(np.arange(K + 1.0) * rng.uniform(0.2, 1.0), diffs, jumps)
