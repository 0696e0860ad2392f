"""Costs and the empirical saddle objectives.

Maps and potentials are any callables taking a (B, n) node: models from
:mod:`otlab.models` or small closures in tests.  Every objective returns a
scalar node, differentiable in whatever parameters the callables use.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .models import IcnnModel, icnn_input_grad
from .numcore import Node


@dataclass(frozen=True)
class CostFn:
    """``coef * |x - y|^p`` with ``coef`` set by ``scaling``.

    ``scaling`` is ``"inv_p"`` (1/p), ``"half"`` (1/2) or ``"unit"`` (1).
    """

    p: float = 2.0
    metric: str = "euclidean"
    scaling: str = "half"

    def __post_init__(self):
        if self.p <= 1:
            raise ValueError("cost exponent must exceed 1")
        if self.metric != "euclidean":
            raise ValueError(f"unsupported metric {self.metric!r}")
        if self.scaling not in ("inv_p", "half", "unit"):
            raise ValueError(f"unknown scaling {self.scaling!r}")

    @property
    def coef(self) -> float:
        return {"inv_p": 1.0 / self.p, "half": 0.5, "unit": 1.0}[self.scaling]

    @property
    def is_quadratic(self) -> bool:
        return self.p == 2.0

    def rows(self, x: Node, y: Node) -> Node:
        """Per-row cost between two (B, n) batches."""
        sq = nc.sum(nc.square(nc.subtract(x, y)), axis=1)
        if self.p != 2.0:
            sq = nc.power(nc.add(sq, nc.constant(np.full(sq.shape, 1e-300))), self.p / 2.0)
        return nc.scale(sq, self.coef)

    def matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        d2 = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
        return self.coef * (d2 if self.p == 2.0 else d2 ** (self.p / 2.0))

    def __call__(self, x, y) -> np.ndarray:
        d2 = np.sum((np.asarray(x, float) - np.asarray(y, float)) ** 2, axis=-1)
        return self.coef * (d2 if self.p == 2.0 else d2 ** (self.p / 2.0))

    def convert(self, value: float, to: "CostFn") -> float:
        """Re-express a cost value under another scaling of the same exponent."""
        if to.p != self.p:
            raise ValueError("can only convert between scalings of one exponent")
        return value * to.coef / self.coef


HALF_SQUARED = CostFn(2.0, scaling="half")
SQUARED = CostFn(2.0, scaling="unit")


class Variant(str, enum.Enum):
    OTP = "otp"
    MONGE_MAP = "mongemap"
    MAX_CORR = "maxcorr"
    OTM = "otm"

    @property
    def is_semi_dual(self) -> bool:
        return self in (Variant.OTP, Variant.MONGE_MAP)


@dataclass(frozen=True)
class ObjectiveKind:
    variant: Variant = Variant.OTP
    penalty_weight: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.penalty_weight < 0:
            raise ValueError("penalty weight must be nonnegative")
        if self.penalty_weight and self.variant is not Variant.OTM:
            raise ValueError("only the OTM variant carries a penalty")

    @classmethod
    def of(cls, name: str) -> "ObjectiveKind":
        v = Variant(name.lower())
        return cls(v, 0.1 if v is Variant.OTM else 0.0)


def _node(x) -> Node:
    return x if isinstance(x, Node) else nc.constant(x)


def _check_dims(tx: Node, y: Node):
    if tx.value.ndim != 2 or y.value.ndim != 2 or tx.shape[1] != y.shape[1]:
        raise nc.ShapeError("objective", f"map output {tx.shape} vs target batch {y.shape}")


def semi_dual_value(t, psi, x, y, cost: CostFn = HALF_SQUARED) -> Node:
    """mean c(x, t(x)) - mean psi(t(x)) + mean psi(y)."""
    x, y = _node(x), _node(y)
    tx = t(x)
    _check_dims(tx, y)
    return nc.add(nc.subtract(nc.mean(cost.rows(x, tx)), nc.mean(psi(tx))),
                  nc.mean(psi(y)))


def maxcorr_value(t, v, x, y) -> Node:
    """mean <x, t(x)> - mean v(t(x)) + mean v(y); the map maximizes, v minimizes."""
    x, y = _node(x), _node(y)
    tx = t(x)
    _check_dims(tx, y)
    corr = nc.mean(nc.sum(nc.mul(x, tx), axis=1))
    return nc.add(nc.subtract(corr, nc.mean(v(tx))), nc.mean(v(y)))


def otm_penalty(t, v: IcnnModel, x) -> Node:
    """mean |x - grad v(t(x))|^2, differentiable through the input gradient."""
    x = _node(x)
    tx = t(x)
    gv = icnn_input_grad(v, tx, create_graph=True)
    return nc.mean(nc.sum(nc.square(nc.subtract(x, gv)), axis=1))


def map_from_potential(phi: IcnnModel, x, cost: CostFn = HALF_SQUARED) -> np.ndarray:
    """Transport map induced by a convex potential: its input gradient."""
    if not cost.is_quadratic:
        raise ValueError("map recovery from a convex potential needs quadratic cost")
    return icnn_input_grad(phi, x.value if isinstance(x, Node) else x)


class SemiDualPotential:
    """psi(y) = |y|^2/2 - v(y): the c-concave potential carried by a convex v."""

    def __init__(self, v):
        self.v = v

    def __call__(self, y) -> Node:
        y = _node(y)
        return nc.subtract(nc.scale(nc.sum(nc.square(y), axis=1), 0.5), self.v(y))

    def parameters(self):
        return self.v.parameters()


def identity_map(x) -> Node:
    return _node(x)
