"""Evaluation quantities for learned maps and potentials."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numcore as nc
from .objectives import HALF_SQUARED, CostFn, semi_dual_value

MAX_DKR_POINTS = 4096


def _apply(f, x: np.ndarray) -> np.ndarray:
    with nc.no_grad():
        out = f(nc.constant(x))
    return out.value if isinstance(out, nc.Node) else np.asarray(out)


@dataclass
class MetricReport:
    map_l2: float
    map_cos: float
    pot_mse_centered: float
    pot_grad_mse: float
    flatness: float
    dkr: float
    n_eval: int
    F: float = float("nan")


def map_l2_error(t, T_star: Callable, x_eval: np.ndarray) -> float:
    """mean |t(x) - T*(x)|^2."""
    diff = _apply(t, x_eval) - T_star(x_eval)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def map_cosine(t, T_star: Callable, x_eval: np.ndarray, return_skipped: bool = False):
    """Mean cosine between t(x) and T*(x); rows with a zero vector are skipped."""
    a, b = _apply(t, x_eval), T_star(x_eval)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not np.any(ok):
        raise ValueError("map cosine undefined: every row has a zero vector")
    cos = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    value = float(np.clip(np.mean(cos), -1.0, 1.0))
    return (value, int(np.sum(~ok))) if return_skipped else value


def centered_potential_mse(psi, psi_star_values: np.ndarray, y_eval: np.ndarray) -> float:
    """MSE between potentials after removing each one's mean."""
    p = _apply(psi, y_eval)
    d = (p - p.mean()) - (psi_star_values - np.mean(psi_star_values))
    return float(np.mean(d * d))


def potential_input_grad(psi, y: np.ndarray) -> np.ndarray:
    yin = nc.leaf(y)
    return nc.grad(nc.sum(psi(yin)), [yin])[0]


def potential_grad_mse(psi, grad_psi_star: np.ndarray, y_eval: np.ndarray) -> float:
    """mean |grad psi(y) - grad psi*(y)|^2."""
    d = potential_input_grad(psi, y_eval) - grad_psi_star
    return float(np.mean(np.sum(d * d, axis=1)))


def flatness(t, psi, optimal_cost: float, x_eval: np.ndarray, y_eval: np.ndarray,
             cost: CostFn = HALF_SQUARED) -> float:
    """|F(psi, t) - C*| with C* expressed under ``cost``."""
    if optimal_cost is None or not np.isfinite(optimal_cost):
        raise ValueError("flatness needs the optimal cost")
    with nc.no_grad():
        F = float(semi_dual_value(t, psi, x_eval, y_eval, cost).value)
    return abs(F - optimal_cost)


def _pad(a: np.ndarray, n: int, rng) -> np.ndarray:
    if len(a) == n:
        return a
    extra = rng.integers(0, len(a), n - len(a))
    return np.concatenate([a, a[extra]])


def empirical_dkr(a: np.ndarray, b: np.ndarray, rng=None) -> float:
    """Exact W1 between two uniform empirical measures of equal size.

    Unequal sizes are padded by resampling the smaller set.  On bounded
    domains this upper-bounds the Kantorovich-Rubinstein distance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    n = max(len(a), len(b))
    if n > MAX_DKR_POINTS:
        raise ValueError(f"{n} samples exceed {MAX_DKR_POINTS}; subsample before calling empirical_dkr")
    if len(a) != len(b):
        rng = np.random.default_rng(rng)
        a, b = _pad(a, n, rng), _pad(b, n, rng)
    C = np.sqrt(np.maximum(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1), 0.0))
    rows, cols = linear_sum_assignment(C)
    return float(C[rows, cols].sum() / n)


@dataclass
class Theorem4Fit:
    constant: float          # max over rows of map_l2 / (flatness + dkr)
    ratios: np.ndarray
    finite: bool


def theorem4_check(rows: Sequence) -> Theorem4Fit:
    """Smallest C with map_l2 <= C (flatness + dkr) on every row.

    ``rows`` may be a ``TrainHistory`` or any sequence of objects/dicts with
    ``map_l2``, ``flatness`` and ``dkr``.
    """
    rows = list(getattr(rows, "rows", rows))
    if not rows:
        raise ValueError("empty history")

    def get(r, k):
        return float(r[k] if isinstance(r, dict) else getattr(r, k))

    ml2 = np.array([get(r, "map_l2") for r in rows])
    rhs = np.array([get(r, "flatness") + get(r, "dkr") for r in rows])
    # exact ratios, no epsilon: a padded denominator would make C too small
    # for the worst row; 0/0 holds for any C and x/0 for none
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(ml2 == 0, 0.0, ml2 / rhs)
    ratios[(ml2 > 0) & (rhs <= 0)] = np.inf
    finite = bool(np.all(np.isfinite(ratios)))
    return Theorem4Fit(float(np.nanmax(ratios)) if finite else float("inf"), ratios, finite)
