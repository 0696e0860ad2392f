import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otlab import benchmarks as bm
from otlab import models
from otlab.objectives import HALF_SQUARED, SQUARED

SMALL_MIX = bm.MixtureSpec(dim=4, components=3, seed=2)
SMALL_ICNN = bm.IcnnConfig(depth=3, seed=5)


@pytest.fixture(scope="module")
def icnn_problem():
    return bm.make_icnn_benchmark(SMALL_MIX, SMALL_ICNN, calib_samples=1024, cost_samples=1024)


def test_gaussian_1d_map_and_cost():
    p = bm.gaussian_1d()
    np.testing.assert_array_equal(p.ground_truth.T(np.array([[0.0], [1.0]])), [[2.0], [3.5]])
    # (2 - 0)^2 + (1.5 - 1)^2
    assert p.ground_truth.optimal_cost == pytest.approx(4.25, abs=1e-15)
    assert p.ground_truth.cost_under(HALF_SQUARED) == pytest.approx(2.125, abs=1e-15)
    assert p.meta["map_offset"] == [2.0] and p.meta["map_slope"] == [1.5]


def test_gaussian_2d_cost():
    p = bm.gaussian_2d()
    assert p.ground_truth.optimal_cost == pytest.approx(4.0, abs=1e-15)
    np.testing.assert_array_equal(p.ground_truth.T(np.zeros((1, 2))), [[1.0, 1.0]])


def test_gaussian_cost_matches_monte_carlo():
    p = bm.gaussian_2d()
    x, y = p.pairs(200_000, np.random.default_rng(0))
    mc = np.mean(np.sum((x - y) ** 2, axis=1))
    assert mc == pytest.approx(4.0, rel=0.02)


def test_gaussian_target_moments():
    p = bm.gaussian_1d()
    y = p.sample_target(200_000, np.random.default_rng(1))
    assert y.mean() == pytest.approx(2.0, abs=0.02)
    assert y.std() == pytest.approx(1.5, abs=0.02)


def test_gaussian_spec_validation():
    with pytest.raises(ValueError):
        bm.GaussianSpec((0.0,), (0.0,))
    with pytest.raises(ValueError):
        bm.GaussianSpec((0.0, 1.0), (1.0, 1.0, 1.0))
    assert bm.GaussianSpec((0.0, 0.0), (2.0,)).std == (2.0, 2.0)
    with pytest.raises(ValueError):
        bm.analytic_gaussian_map(bm.GaussianSpec((0.0,), (1.0,)), bm.GaussianSpec((0.0, 0.0), (1.0,)))


@settings(max_examples=30, deadline=None)
@given(m1=st.floats(-3, 3), m2=st.floats(-3, 3), s1=st.floats(0.2, 3), s2=st.floats(0.2, 3),
       y=st.floats(-5, 5))
def test_affine_conjugate_is_legendre_transform(m1, m2, s1, s2, y):
    amap = bm.AffineMap(bm.GaussianSpec((m1,), (s1,)), bm.GaussianSpec((m2,), (s2,)))
    grid = np.linspace(-60, 60, 200_001)[:, None]
    numeric = np.max(grid[:, 0] * y - amap.phi(grid))
    assert amap.phi_conj(np.array([[y]]))[0] == pytest.approx(numeric, abs=1e-5)


def test_affine_potential_gradients():
    amap = bm.AffineMap(bm.GaussianSpec((0.0, 1.0), (1.0, 2.0)), bm.GaussianSpec((1.0, -1.0), (3.0, 0.5)))
    y = np.random.default_rng(0).normal(size=(5, 2))
    gt = bm.gaussian_problem(amap.src, amap.dst).ground_truth
    np.testing.assert_allclose(gt.grad_psi(y), y - amap.inverse(y), rtol=1e-14)
    np.testing.assert_allclose(gt.psi(y), amap.psi(y), rtol=1e-12, atol=1e-12)


def test_mixture_parameters():
    s = bm.build_mixture(bm.MixtureSpec(dim=6, components=5, seed=3))
    np.testing.assert_allclose(np.linalg.norm(s.means, axis=1), 2.5, rtol=1e-14)
    assert s.weights.sum() == pytest.approx(1.0, abs=1e-15) and np.all(s.weights > 0)
    log_s = np.log(s.stds / 0.35)
    np.testing.assert_allclose(log_s.mean(axis=1), 0.0, atol=1e-12)
    x, labels = s.sample(100, np.random.default_rng(0), return_labels=True)
    assert x.shape == (100, 6) and labels.max() < 5


def test_icnn_pairs_follow_the_potential_gradient(icnn_problem):
    x, y = icnn_problem.pairs(64, np.random.default_rng(0))
    np.testing.assert_array_equal(y, models.icnn_input_grad(icnn_problem.phi_model, x))


def test_calibration_matches_formula(icnn_problem):
    phi0 = models.init_model("icnn", [4, 4, 4, 4], 0.14, 5, alpha=0.05)
    x = bm.build_mixture(SMALL_MIX)(1024, np.random.default_rng([2, 5, 1]))
    g = models.icnn_input_grad(phi0, x)
    a = np.sqrt(np.mean(np.sum(x ** 2, 1))) / np.sqrt(np.mean(np.sum(g ** 2, 1)))
    assert abs(icnn_problem.meta["calibration_scale"] - a) < 1e-9
    # calibrated gradients carry the source's second moment
    g1 = models.icnn_input_grad(icnn_problem.phi_model, x)
    assert np.mean(np.sum(g1 ** 2, 1)) == pytest.approx(np.mean(np.sum(x ** 2, 1)), rel=1e-10)


def test_degenerate_calibration_raises():
    phi0 = models.init_model("icnn", [2, 3], 0.1, 0)
    for p in phi0.parameters():
        p.value = np.zeros_like(p.value)
    with pytest.raises(ValueError):
        bm.calibration_scale(phi0, np.ones((4, 2)))


def test_target_potential_pairs_identities(icnn_problem):
    pp = bm.target_potential_pairs(icnn_problem, 128, np.random.default_rng(4))
    phi = icnn_problem.ground_truth.phi
    # Fenchel-Young equality on the graph of the optimal map
    np.testing.assert_allclose(phi(pp.x) + pp.phi_conj, np.sum(pp.x * pp.y, 1), atol=1e-12)
    np.testing.assert_array_equal(pp.grad_phi_conj, pp.x)
    np.testing.assert_allclose(pp.grad_psi, pp.y - pp.x, atol=0)
    # grad Phi(grad Phi*(y)) = y
    np.testing.assert_allclose(icnn_problem.ground_truth.T(pp.grad_phi_conj), pp.y, atol=1e-12)


def test_icnn_optimal_cost_has_standard_error(icnn_problem):
    gt = icnn_problem.ground_truth
    assert gt.optimal_cost > 0 and 0 < gt.optimal_cost_se < gt.optimal_cost


def test_pairs_csv_roundtrip(tmp_path):
    x, y = bm.gaussian_2d().pairs(10, np.random.default_rng(0))
    bm.write_pairs(tmp_path / "p.csv", x, y)
    x2, y2 = bm.read_pairs(tmp_path / "p.csv")
    assert np.array_equal(x, x2) and np.array_equal(y, y2)


def test_export_is_deterministic(tmp_path, icnn_problem):
    a = bm.export_benchmark(icnn_problem, tmp_path / "a", seed=3, n_split=50)
    b = bm.export_benchmark(icnn_problem, tmp_path / "b", seed=3, n_split=50)
    for name in ("pairs_validation.csv", "pairs_test.csv", "phi.model", "meta.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    meta = json.loads((a / "meta.json").read_text())
    assert meta["dim"] == 4 and meta["phi_file"] == "phi.model"
    back = models.load_model(a / "phi.model")
    x, y = bm.read_pairs(a / "pairs_test.csv")
    np.testing.assert_allclose(models.icnn_input_grad(back, x), y, atol=1e-12)


def test_problem_from_config():
    assert bm.problem_from_config({"kind": "gaussian1d"}).dim == 1
    p = bm.problem_from_config({"kind": "gaussian", "src_mean": [0, 0, 0], "src_std": [1],
                                "dst_mean": [1, 2, 3], "dst_std": [2]})
    assert p.dim == 3 and p.ground_truth.optimal_cost == pytest.approx(14 + 3)
    with pytest.raises(ValueError):
        bm.problem_from_config({"kind": "swiss-roll"})


def test_gaussian_cost_under_other_scalings():
    assert bm.gaussian_2d().ground_truth.cost_under(SQUARED) == 4.0
