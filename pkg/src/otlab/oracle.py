"""Exact discrete optimal transport between equal-weight point clouds.

With n points on each side and weights 1/n the transport polytope's vertices
are permutations, so the Kantorovich problem is an assignment problem.  The
solver below returns the optimal permutation together with dual potentials,
and the remaining functions evaluate the discrete saddle functional
``F(psi, t) = mean_i C[i, t(i)] + mean_j psi_j - mean_i psi_{t(i)}``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .objectives import CostFn, HALF_SQUARED

MAX_POINTS = 4096


@dataclass
class DiscreteInstance:
    x: np.ndarray
    y: np.ndarray
    cost_matrix: np.ndarray
    cost: CostFn = HALF_SQUARED

    def __post_init__(self):
        C = self.cost_matrix
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValueError(f"cost matrix must be square, got {C.shape}")
        if not np.all(np.isfinite(C)) or np.any(C < 0):
            raise ValueError("cost matrix entries must be finite and nonnegative")

    @property
    def n(self) -> int:
        return self.cost_matrix.shape[0]

    @classmethod
    def from_points(cls, x, y, cost: CostFn = HALF_SQUARED) -> "DiscreteInstance":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim == 1:
            x, y = x[:, None], y[:, None]
        if x.shape != y.shape:
            raise ValueError(f"point sets must have equal shape, got {x.shape} and {y.shape}")
        return cls(x, y, cost.matrix(x, y), cost)

    @classmethod
    def random(cls, n: int, dim: int, rng, cost: CostFn = HALF_SQUARED) -> "DiscreteInstance":
        return cls.from_points(rng.uniform(-3, 3, (n, dim)), rng.uniform(-3, 3, (n, dim)), cost)


@dataclass
class DualPair:
    phi: np.ndarray
    psi: np.ndarray

    def max_violation(self, C: np.ndarray) -> float:
        """Largest amount by which phi_i + psi_j exceeds C_ij (<= 0 when feasible)."""
        return float(np.max(self.phi[:, None] + self.psi[None, :] - C))


class Assignment(NamedTuple):
    perm: np.ndarray
    cost: float
    duals: DualPair


def hungarian(C: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path assignment with potentials, O(n^3).

    Returns ``(perm, u, v)`` with ``perm[i]`` the column of row ``i`` and
    ``u_i + v_j <= C_ij``, tight on the assignment.
    """
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    Cp = np.zeros((n + 1, n + 1))
    Cp[1:, 1:] = C
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = Cp[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    perm[p[1:] - 1] = np.arange(n)
    return perm, u[1:].copy(), v[1:].copy()


def solve_assignment(instance: DiscreteInstance) -> Assignment:
    """Optimal permutation, its mean cost K*, and complementary duals."""
    if instance.n > MAX_POINTS:
        raise ValueError(f"n={instance.n} exceeds {MAX_POINTS}; subsample first")
    perm, u, v = hungarian(instance.cost_matrix)
    C = instance.cost_matrix
    # Re-tighten: phi = psi^c makes phi_i + psi_j <= C_ij hold exactly in floating point.
    psi = v
    phi = c_transform(psi, C, side="x")
    value = float(np.mean(C[np.arange(instance.n), perm]))
    return Assignment(perm, value, DualPair(phi, psi))


def c_transform(vec: np.ndarray, C: np.ndarray, side: str = "x") -> np.ndarray:
    """c-transform of a potential living on the other side.

    ``side="x"``: ``vec`` is psi over y-points, returns psi^c(x_i) = min_j C_ij - psi_j.
    ``side="y"``: ``vec`` is phi over x-points, returns phi^c(y_j) = min_i C_ij - phi_i.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if side == "x":
        return np.min(C - vec[None, :], axis=1)
    if side == "y":
        return np.min(C - vec[:, None], axis=0)
    raise ValueError(f"side must be 'x' or 'y', not {side!r}")


def double_c_transform(psi: np.ndarray, C: np.ndarray) -> np.ndarray:
    return c_transform(c_transform(psi, C, "x"), C, "y")


def semidual_value(psi: np.ndarray, instance: DiscreteInstance) -> float:
    """mean_i psi^c(x_i) + mean_j psi_j."""
    psi = np.asarray(psi, dtype=np.float64)
    return float(np.mean(c_transform(psi, instance.cost_matrix, "x")) + np.mean(psi))


def saddle_value(psi: np.ndarray, t: np.ndarray, instance: DiscreteInstance) -> float:
    """Discrete F(psi, t) for an index map ``t`` from x-points to y-points."""
    psi = np.asarray(psi, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    C = instance.cost_matrix
    n = instance.n
    # fsum is exactly rounded, hence order-free: for a bijection the psi terms cancel exactly.
    return (math.fsum(C[np.arange(n), t]) + (math.fsum(psi) - math.fsum(psi[t]))) / n


def is_bijection(t: np.ndarray, n: int) -> bool:
    t = np.asarray(t)
    return t.shape == (n,) and np.array_equal(np.sort(t), np.arange(n))


def flatness_witness(instance: DiscreteInstance, perm: np.ndarray, trials: int = 100,
                     rng=None, psi_scale: float = 10.0) -> float:
    """Spread of F(psi, perm) over random psi; zero for any bijection."""
    if not is_bijection(perm, instance.n):
        raise ValueError("flatness witness needs a bijective index map")
    rng = np.random.default_rng(rng)
    vals = [saddle_value(rng.normal(0, psi_scale, instance.n), perm, instance)
            for _ in range(trials)]
    return float(np.max(vals) - np.min(vals))


def saddle_spread(instance: DiscreteInstance, t: np.ndarray, trials: int = 100,
                  rng=None, psi_scale: float = 1.0) -> float:
    """Spread of F(psi, t) over random psi for an arbitrary index map."""
    rng = np.random.default_rng(rng)
    vals = [saddle_value(rng.normal(0, psi_scale, instance.n), t, instance)
            for _ in range(trials)]
    return float(np.max(vals) - np.min(vals))


class UnboundednessWitness(NamedTuple):
    values: list[float]
    support: np.ndarray   # y-indices of the set A
    mass: float           # sigma(A) = nu(A) - t#mu(A) > 0


def unboundedness_witness(instance: DiscreteInstance, t: np.ndarray,
                          M_list=(0.0, 1.0, 10.0, 100.0)) -> UnboundednessWitness:
    """Evaluate F(M * 1_A, t) where A collects targets that t under-covers."""
    n = instance.n
    t = np.asarray(t, dtype=np.int64)
    counts = np.bincount(t, minlength=n)
    deficit = (1.0 - counts) / n
    support = np.flatnonzero(deficit > 0)
    if support.size == 0:
        raise ValueError("map pushes mu onto nu exactly; no separating set exists")
    mass = float(np.sum(deficit[support]))
    values = []
    for M in M_list:
        psi = np.zeros(n)
        psi[support] = M
        values.append(saddle_value(psi, t, instance))
    return UnboundednessWitness(values, support, mass)


def cconcavity_gap(psi: np.ndarray, instance: DiscreteInstance) -> float:
    """mean_j (psi^cc_j - psi_j): nonnegative, zero exactly on c-concave psi."""
    psi = np.asarray(psi, dtype=np.float64)
    return float(np.mean(double_c_transform(psi, instance.cost_matrix) - psi))


def min_over_maps(psi: np.ndarray, instance: DiscreteInstance) -> tuple[float, np.ndarray]:
    """Pointwise minimization of F(psi, .) over all index maps."""
    psi = np.asarray(psi, dtype=np.float64)
    t = np.argmin(instance.cost_matrix - psi[None, :], axis=1)
    return saddle_value(psi, t, instance), t


# ---------------------------------------------------------------------------
# CSV fixtures: columns x0..x{d-1}, y0..y{d-1}; first line "# cost=<p>,<scaling>".
# ---------------------------------------------------------------------------

def save_instance(instance: DiscreteInstance, path):
    d = instance.x.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(f"# cost={instance.cost.p!r},{instance.cost.scaling}\n")
        w = csv.writer(fh)
        w.writerow([f"x{k}" for k in range(d)] + [f"y{k}" for k in range(d)])
        for xi, yi in zip(instance.x, instance.y):
            w.writerow([repr(float(v)) for v in (*xi, *yi)])


def load_instance(path) -> DiscreteInstance:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# cost="):
        raise ValueError(f"{path}: missing cost tag")
    p, scaling = lines[0][len("# cost="):].split(",")
    rows = list(csv.reader(lines[1:]))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64)
    d = sum(1 for h in header if h.startswith("x"))
    return DiscreteInstance.from_points(body[:, :d], body[:, d:], CostFn(float(p), scaling=scaling))
