"""Shared test builders and independent oracles."""

import math

import numpy as np

from driftlab import autodiff as ad
from driftlab.autodiff import Tensor
from driftlab.molecule import MoleculeGraph

# PASS/FAIL lines collected by the acceptance suite and echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def random_expression(rng: np.random.Generator, shape=(3, 4), depth: int = 4):
    """A random composite scalar function of one ``shape`` tensor.

    Each layer applies one op drawn from the differentiable op set; some ops
    mix the original input back in so the graph is a DAG, not a chain.
    Scalings keep intermediates away from saturation and kinks.
    """
    n, m = shape
    C = rng.normal(size=(m, m)) / np.sqrt(m)
    perm = rng.permutation(n)
    weights = rng.normal(size=shape)
    ops = [
        lambda u, x: ad.tanh(ad.scale(u, 0.3)),
        lambda u, x: ad.exp(ad.scale(u, 0.1)),
        lambda u, x: ad.log(u * u + 1.0),
        lambda u, x: ad.sqrt(u * u + 1.0),
        lambda u, x: u @ Tensor(C),
        lambda u, x: ad.scale(ad.softmax(u, axis=1), 3.0),
        lambda u, x: u / (x * x + 1.0),
        lambda u, x: u + ad.scale(u * x, 0.1),
        lambda u, x: ad.broadcast(ad.norm(u, axis=1, keepdims=True), shape) * ad.scale(u, 0.1),
        lambda u, x: ad.concat([u[:, :2], ad.scale(u[:, 2:], 2.0)], axis=1),
        lambda u, x: ad.gather_rows(u, perm),
        lambda u, x: u - ad.scale(ad.broadcast(ad.mean(u, axis=0, keepdims=True), shape), 0.5),
        lambda u, x: u - ad.scale(x, 0.5),
        lambda u, x: u + ad.scale(ad.squared_norm(u, axis=0), 0.05),
        lambda u, x: ad.relu(x) + u,
    ]
    chosen = [ops[i] for i in rng.integers(0, len(ops), size=depth)]

    def f(x):
        u = x
        for op in chosen:
            u = op(u, x)
        return ad.sum_(u * weights)

    return f


def random_input(rng: np.random.Generator, shape=(3, 4)) -> np.ndarray:
    """Entries with magnitude in [0.1, 10] and random sign."""
    return rng.uniform(0.1, 10.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def well_conditioned(f, x: np.ndarray, floor: float = 1e-4) -> bool:
    """True when central differences can resolve every gradient coordinate.

    Uses only the numerical gradient: the value must be moderate and no
    coordinate may be tiny relative to the largest, since a relative error
    against a gradient below finite-difference roundoff is meaningless.
    """
    value = f(Tensor(x)).item()
    if not np.isfinite(value) or abs(value) > 1e6:
        return False
    num = np.abs(ad.numerical_jacobian(f, x)).ravel()
    return bool(np.all(np.isfinite(num)) and num.min() >= floor * max(1.0, num.max()))


def conditioned_expressions(seed: int, count: int, shape=(3, 4)):
    """``count`` well-conditioned (function, input) pairs drawn from one seeded stream."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        f, x = random_expression(rng, shape), random_input(rng, shape)
        if well_conditioned(f, x):
            out.append((f, x))
    return out


# -- toy generator with explicit Jacobians -------------------------------------

class ToyGenerator:
    """z = eps @ A with features phi = tanh(z @ M); Jacobians are explicit."""

    def __init__(self, rng, n=6, d_in=3, d_z=4, d_phi=5):
        self.eps = rng.normal(size=(n, d_in))
        self.A = Tensor(rng.normal(size=(d_in, d_z)), requires_grad=True)
        self.M = rng.normal(size=(d_z, d_phi))
        self.refs = rng.normal(size=(7, d_phi))

    def latents(self):
        return Tensor(self.eps) @ self.A

    def features(self, z):
        return ad.tanh(z @ Tensor(self.M))


# -- brute-force oracles ---------------------------------------------------------

def oracle_ranks(x):
    return [1 + sum(y < v for y in x) + (sum(y == v for y in x) - 1) / 2 for v in x]


def oracle_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return 0.0 if va == 0 or vb == 0 else cov / math.sqrt(va * vb)


def oracle_spearman(t, a):
    return oracle_pearson(oracle_ranks(list(t)), oracle_ranks(list(a)))


def oracle_mae_slope(t, a):
    n = len(t)
    mae = sum(abs(x - y) for x, y in zip(a, t)) / n
    mt, ma = sum(t) / n, sum(a) / n
    var = sum((x - mt) ** 2 for x in t)
    slope = sum((x - mt) * (y - ma) for x, y in zip(t, a)) / var if var else math.nan
    return mae, slope


def oracle_intdiv(fps):
    sets = [set(np.flatnonzero(f).tolist()) for f in fps]
    sims = []
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            union = sets[i] | sets[j]
            sims.append(len(sets[i] & sets[j]) / len(union) if union else 1.0)
    return 1 - sum(sims) / len(sims)


def isomorphic(a: MoleculeGraph, b: MoleculeGraph) -> bool:
    """Backtracking search for a bond- and element-preserving bijection."""
    if a.n_atoms != b.n_atoms or sorted(a.atoms) != sorted(b.atoms) or len(a.bonds) != len(b.bonds):
        return False
    ea = {(i, j): o for i, j, o in a.bonds}
    ea.update({(j, i): o for (i, j), o in list(ea.items())})
    eb = {(i, j): o for i, j, o in b.bonds}
    eb.update({(j, i): o for (i, j), o in list(eb.items())})
    n = a.n_atoms
    mapping: list[int] = []
    used = [False] * n

    def extend() -> bool:
        v = len(mapping)
        if v == n:
            return True
        for w in range(n):
            if used[w] or a.atoms[v] != b.atoms[w] or a.degree(v) != b.degree(w):
                continue
            if all(ea.get((u, v)) == eb.get((mapping[u], w)) for u in range(v)):
                mapping.append(w)
                used[w] = True
                if extend():
                    return True
                mapping.pop()
                used[w] = False
        return False

    return extend()
