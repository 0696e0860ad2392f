import numpy as np
import pytest

from otlab import models
from otlab import numcore as nc
from otlab.objectives import (HALF_SQUARED, SQUARED, CostFn, ObjectiveKind, SemiDualPotential,
                              Variant, identity_map, map_from_potential, maxcorr_value,
                              otm_penalty, semi_dual_value)

rng = np.random.default_rng(0)


def test_cost_scalings():
    x, y = np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])
    assert HALF_SQUARED(x, y)[0] == 12.5
    assert SQUARED(x, y)[0] == 25.0
    assert CostFn(3.0, scaling="inv_p")(x, y)[0] == pytest.approx(125.0 / 3)
    assert HALF_SQUARED.convert(2.125, SQUARED) == 4.25


def test_cost_rejects_bad_parameters():
    with pytest.raises(ValueError):
        CostFn(1.0)
    with pytest.raises(ValueError):
        CostFn(2.0, metric="manhattan")
    with pytest.raises(ValueError):
        CostFn(2.0, scaling="double")


def test_cost_matrix_agrees_with_rows():
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    for cost in (HALF_SQUARED, CostFn(3.0)):
        M = cost.matrix(x, y)
        np.testing.assert_allclose(np.diag(M), cost.rows(nc.constant(x), nc.constant(y)).value,
                                   rtol=1e-12)


def test_objective_kind():
    assert ObjectiveKind.of("OTM").penalty_weight == 0.1
    assert ObjectiveKind.of("otp").penalty_weight == 0.0
    assert Variant.MONGE_MAP.is_semi_dual and not Variant.MAX_CORR.is_semi_dual
    with pytest.raises(ValueError):
        ObjectiveKind(Variant.OTP, 0.5)
    with pytest.raises(ValueError):
        ObjectiveKind.of("sinkhorn")


def test_semi_dual_value_identity_map_zero_potential():
    x = rng.normal(size=(10, 2))
    F = semi_dual_value(identity_map, lambda y: nc.sum(nc.scale(y, 0.0), axis=1), x, x)
    assert F.value == 0.0


def test_semi_dual_value_dimension_mismatch():
    with pytest.raises(nc.ShapeError):
        semi_dual_value(identity_map, lambda y: nc.sum(y, axis=1), np.zeros((3, 2)), np.zeros((3, 1)))


def test_semi_dual_value_by_hand():
    x, y = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))

    def psi(v):
        return nc.sum(nc.softplus(v), axis=1)

    def t(v):
        return nc.scale(v, 2.0)

    tx = 2 * x
    expect = (np.mean(0.5 * np.sum((x - tx) ** 2, axis=1))
              - np.mean(np.sum(np.logaddexp(0, tx), axis=1))
              + np.mean(np.sum(np.logaddexp(0, y), axis=1)))
    assert semi_dual_value(t, psi, x, y).value == pytest.approx(expect, rel=1e-12)


def test_maxcorr_value_by_hand():
    x, y = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))

    def v(u):
        return nc.scale(nc.sum(nc.square(u), axis=1), 0.5)

    expect = np.mean(np.sum(x * x, axis=1)) - np.mean(0.5 * np.sum(x * x, axis=1)) \
        + np.mean(0.5 * np.sum(y * y, axis=1))
    assert maxcorr_value(identity_map, v, x, y).value == pytest.approx(expect, rel=1e-12)


def test_otm_penalty_zero_for_inverse_pair():
    """v(y) = |y|^2/4 has grad v(y) = y/2; with t(x) = 2x the residual vanishes."""
    v = models.init_model("icnn", [2, 3], 0.1, 0, alpha=0.5)
    for p in v.parameters():
        p.value = np.zeros_like(p.value)
    # the softplus layer contributes constants only once every weight is zero
    x = rng.normal(size=(5, 2))
    pen = otm_penalty(lambda u: nc.scale(u, 2.0), v, x)
    assert pen.value == pytest.approx(0.0, abs=1e-24)


def test_otm_penalty_differentiable_in_potential():
    v = models.init_model("icnn", [2, 4], 0.3, 1, alpha=0.1)
    x = rng.normal(size=(5, 2))
    params = v.parameters()
    grads = nc.grad(otm_penalty(identity_map, v, x), params)
    assert any(np.any(g != 0) for g in grads)


def test_map_from_potential_is_gradient_and_rejects_non_quadratic():
    v = models.init_model("icnn", [2, 4], 0.3, 1, alpha=0.1)
    x = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(map_from_potential(v, x), models.icnn_input_grad(v, x))
    with pytest.raises(ValueError):
        map_from_potential(v, x, CostFn(3.0))


def test_semidual_potential_wraps_convex_function():
    v = models.init_model("icnn", [2, 4], 0.3, 1, alpha=0.1)
    y = rng.normal(size=(5, 2))
    np.testing.assert_allclose(SemiDualPotential(v)(y).value,
                               0.5 * np.sum(y * y, axis=1) - v(y).value, rtol=1e-13)
    assert SemiDualPotential(v).parameters() == v.parameters()
