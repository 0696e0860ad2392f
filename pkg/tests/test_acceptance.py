"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected in the
terminal summary).  Run alone with ``pytest tests/test_acceptance.py -s``.
The training criteria (7 to 9) take roughly a quarter of an hour on one core.
"""

from __future__ import annotations

import itertools
import time

import numpy as np
import pytest
import scipy.optimize
import scipy.stats
from conftest import record_criterion

from otlab import benchmarks as bm
from otlab import cli, metrics, models, oracle, solver
from otlab import numcore as nc
from otlab.objectives import HALF_SQUARED, otm_penalty, semi_dual_value
from otlab.oracle import DiscreteInstance

SIZES, DIMS = (4, 8, 16, 64), (1, 2, 8)


def discrete_instances(count: int, seed: int):
    rng = np.random.default_rng(seed)
    return [DiscreteInstance.random(SIZES[k % 4], DIMS[k % 3], rng) for k in range(count)], rng


# ---------------------------------------------------------------------------
# 1-4: discrete oracle
# ---------------------------------------------------------------------------

def test_criterion_01_exact_duality():
    t0 = time.perf_counter()
    insts, rng = discrete_instances(50, 101)
    strong, weak = 0.0, -np.inf
    for inst in insts:
        sol = oracle.solve_assignment(inst)
        strong = max(strong, abs(oracle.semidual_value(sol.duals.psi, inst) - sol.cost))
        scale = np.ptp(inst.cost_matrix)
        for _ in range(1000):
            psi = rng.normal(0, scale, inst.n) if rng.random() < 0.5 else \
                sol.duals.psi + rng.normal(0, 0.1, inst.n)
            weak = max(weak, oracle.semidual_value(psi, inst) - sol.cost)
    elapsed = time.perf_counter() - t0
    ok = strong < 1e-9 and weak <= 1e-9 and elapsed < 60
    record_criterion(1, ok, f"max|semidual-K*|={strong:.2e} max(semidual(psi)-K*)={weak:.2e} "
                            f"({elapsed:.1f}s)")
    assert ok


def test_criterion_02_degenerate_saddle_flatness():
    insts, rng = discrete_instances(50, 202)
    spreads = []
    for inst in insts:
        sol = oracle.solve_assignment(inst)
        spreads.append(oracle.flatness_witness(inst, sol.perm, 100, rng))
        spreads.append(oracle.flatness_witness(inst, rng.permutation(inst.n), 100, rng))
    discrete_ok = all(s == 0.0 for s in spreads)

    # sample level: x ~ mu and y = T*(x), so both potential terms see the same points
    p = bm.gaussian_1d()
    x, y = p.pairs(2048, np.random.default_rng(7))
    T = lambda v: nc.add(nc.scale(v, 1.5), nc.constant(np.full(v.shape, 2.0)))  # noqa: E731
    vals = []
    for s in range(100):
        psi = models.default_mlp(1, 1, seed=s, hidden=(16, 16), potential=True,
                                 init_std=float(np.random.default_rng(s).uniform(0.1, 3.0)))
        vals.append(float(semi_dual_value(T, psi, x, y, HALF_SQUARED).value))
    sample_spread = max(vals) - min(vals)
    ok = discrete_ok and sample_spread < 1e-9
    record_criterion(2, ok, f"discrete spread max={max(spreads):.1e} over {len(spreads)} maps; "
                            f"sample-level spread={sample_spread:.1e} over 100 MLP potentials")
    assert ok


def test_criterion_03_unboundedness():
    insts, rng = discrete_instances(20, 303)
    worst = np.inf
    Ms = (0.0, 1.0, 10.0, 100.0)
    for inst in insts:
        n = inst.n
        t = rng.integers(0, n, n)
        t[0] = t[1]  # at least one collision, so t does not push mu onto nu
        assert not oracle.is_bijection(t, n)
        w = oracle.unboundedness_witness(inst, t, Ms)
        for M, v in zip(Ms[1:], w.values[1:]):
            worst = min(worst, v - (w.values[0] + M * w.mass))
    ok = worst >= -1e-9
    record_criterion(3, ok, f"min F(psi_M,t) - F(psi_0,t) - M sigma(A) = {worst:.2e} (20 maps, M in 1,10,100)")
    assert ok


def test_criterion_04_cconcavity_gap():
    insts, rng = discrete_instances(50, 404)
    at_duals, perturbed, random_min = [], [], np.inf
    for inst in insts:
        sol = oracle.solve_assignment(inst)
        at_duals.append(abs(oracle.cconcavity_gap(sol.duals.psi, inst)))
        # Push one entry below every c-concave envelope (a drop larger than the
        # spread of C and psi), then add noise: the result is never c-concave.
        psi = sol.duals.psi.copy()
        j = rng.integers(inst.n)
        psi[j] -= 2 * np.ptp(inst.cost_matrix) + 2 * np.ptp(psi) + 1.0
        psi += rng.normal(0, 0.1, inst.n)
        perturbed.append(oracle.cconcavity_gap(psi, inst))
        for _ in range(20):
            random_min = min(random_min, oracle.cconcavity_gap(rng.normal(0, 5, inst.n), inst))
    random_min = min(random_min, min(perturbed))
    ok = max(at_duals) == 0.0 or max(at_duals) < 1e-9
    ok = ok and min(perturbed) > 0 and random_min >= -1e-9
    record_criterion(4, ok, f"duals max|gap|={max(at_duals):.1e}; perturbed min gap={min(perturbed):.3g}; "
                            f"min gap overall={random_min:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 5-6: gradients and convexity
# ---------------------------------------------------------------------------

def _fd_check(objective, params):
    """Worst relative error between reverse-mode and central differences over ``params``."""
    grads = nc.grad(objective(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        base = p.value.copy()

        def f(v, p=p, base=base):
            p.value = v
            out = float(objective().value)
            p.value = base
            return out

        fd = nc.finite_diff_grad(f, base.copy(), 1e-5)
        p.value = base
        worst = max(worst, nc.relative_error(g, fd, floor=1e-7))
    return worst


def _input_check(model, x, w):
    xin = nc.leaf(x)
    (g,) = nc.grad(nc.sum(nc.mul(model(xin), nc.constant(w))), [xin])
    fd = nc.finite_diff_grad(lambda v: float(np.sum(model(v).value * w)), x.copy(), 1e-6)
    return nc.relative_error(g, fd, floor=1e-7)


def test_criterion_05_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    worst = {"mlp params": 0.0, "mlp input": 0.0, "icnn params": 0.0, "icnn input": 0.0,
             "icnn input-grad (2nd order)": 0.0, "otm penalty params": 0.0}
    for k in range(20):
        d = int(rng.integers(1, 5))
        widths = tuple(int(w) for w in rng.integers(2, 7, size=int(rng.integers(1, 4))))
        act = ("softplus", "leaky_relu")[k % 2]
        x = rng.normal(0, 1.5, (int(rng.integers(2, 7)), d))

        mlp = models.init_model("mlp", [d, *widths, d], float(rng.uniform(0.3, 1.2)), k, activation=act)
        if act == "leaky_relu":
            # central differences need every pre-activation clear of the kink
            with nc.no_grad():
                h = x
                for W, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
                    pre = h @ W.value.T + b.value
                    b.value = b.value + np.where(np.min(np.abs(pre), 0) < 1e-3, 0.05, 0.0)
                    pre = h @ W.value.T + b.value
                    h = np.where(pre > 0, pre, 0.2 * pre)
        w = rng.normal(size=(len(x), d))
        worst["mlp params"] = max(worst["mlp params"], _fd_check(
            lambda: nc.sum(nc.mul(mlp(x), nc.constant(w))), mlp.parameters()))
        worst["mlp input"] = max(worst["mlp input"], _input_check(mlp, x, w))

        icnn = models.init_model("icnn", [d, *widths], float(rng.uniform(0.2, 0.8)), 100 + k,
                                 alpha=float(rng.uniform(0, 0.3)), scale=float(rng.uniform(0.5, 2)))
        wv = rng.normal(size=len(x))
        worst["icnn params"] = max(worst["icnn params"], _fd_check(
            lambda: nc.sum(nc.mul(icnn(x), nc.constant(wv))), icnn.parameters()))
        worst["icnn input"] = max(worst["icnn input"], _input_check(icnn, x, wv))
        wg = rng.normal(size=(len(x), d))
        worst["icnn input-grad (2nd order)"] = max(worst["icnn input-grad (2nd order)"], _fd_check(
            lambda: nc.sum(nc.mul(models.icnn_input_grad(icnn, x, create_graph=True), nc.constant(wg))),
            icnn.parameters()))

        tmap = models.init_model("mlp", [d, 5, d], 0.5, 200 + k, activation="softplus")
        worst["otm penalty params"] = max(worst["otm penalty params"], _fd_check(
            lambda: otm_penalty(tmap, icnn, x), tmap.parameters() + icnn.parameters()))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 120
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    record_criterion(5, ok, f"max relative error over 20 configs each: {detail} ({elapsed:.0f}s)")
    assert ok


def _convexity_residuals(model, rng, n_pairs=10_000, spread=3.0):
    d = model.input_dim
    a = rng.normal(0, spread, (n_pairs, d))
    b = rng.normal(0, spread, (n_pairs, d))
    fa, fb, fm = model(a).value, model(b).value, model(0.5 * (a + b)).value
    mid = np.min(0.5 * (fa + fb) - fm + 1e-12 * (1 + np.abs(fm)))
    ga, gb = models.icnn_input_grad(model, a), models.icnn_input_grad(model, b)
    margin = model.scale * model.alpha
    mono = np.sum((ga - gb) * (a - b), 1) - margin * np.sum((a - b) ** 2, 1)
    return float(mid), float(np.min(mono + 1e-10 * (1 + np.abs(mono))))


def test_criterion_06_icnn_convexity():
    rng = np.random.default_rng(606)
    problem = bm.gaussian_2d()
    results = []
    for k, (widths, alpha, scale) in enumerate([((16, 16, 16), 0.05, 1.0), ((32, 32), 0.1, 2.5),
                                                 ((8, 8, 8, 8), 0.05, 0.7)]):
        v = models.init_model("icnn", [2, *widths], 0.3, 60 + k, alpha=alpha, scale=scale)
        results.append(("init", _convexity_residuals(v, rng)))
        cfg = solver.SolverConfig(K=2, eta_t=1e-3, eta_psi=5e-2, batch_size=64, seed=k,
                                  map_hidden=(16, 16), potential_arch="icnn", optimizer="sgd")
        state = solver.TrainState(cfg, models.default_mlp(2, 2, k, hidden=(16, 16)), v,
                                  np.random.default_rng(k), problem)
        clipped = 0
        for _ in range(100):
            solver.inner_map_steps(state)
            solver.potential_step(state)
            clipped += sum(int(np.sum(W.value == 0)) for W in v.hidden_weights)
        results.append(("trained", _convexity_residuals(v, rng)))
    # the benchmark's calibrated ground-truth potential, margin a * alpha
    phi = bm.make_icnn_benchmark().phi_model
    results.append(("ground truth", _convexity_residuals(phi, rng, spread=2.0)))
    worst_mid = min(r[1][0] for r in results)
    worst_mono = min(r[1][1] for r in results)
    ok = worst_mid >= 0 and worst_mono >= 0
    record_criterion(6, ok, f"{len(results)} models x 10^4 pairs: min midpoint gap={worst_mid:.2e}, "
                            f"min monotonicity excess={worst_mono:.2e} (projection active: {clipped > 0})")
    assert ok


# ---------------------------------------------------------------------------
# 7-9: training runs (desk scale)
# ---------------------------------------------------------------------------

FIG1_CONFIG = dict(K=10, eta_t=3e-3, eta_psi=3e-4, outer_iterations=2000, batch_size=256,
                   eval_every=250, eval_batch=512, flatness_batch=8192, map_hidden=(32, 32, 32),
                   potential_hidden=(32, 32, 32), potential_arch="mlp", perturb_psi_at=2000,
                   perturb_noise=0.5, extra_steps=1000)
SWEEP_GRID = {"K": [1, 5, 10, 15, 20], "ratios": [1.0, 0.1, 0.01], "eta_t": 3e-3, "seeds": [0, 1, 2, 3, 4]}
SWEEP_SOLVER = dict(outer_iterations=500, batch_size=128, eval_every=100, eval_batch=512,
                    flatness_batch=2048, map_hidden=(32, 32, 32), potential_hidden=(32, 32, 32),
                    potential_arch="mlp")


@pytest.fixture(scope="module")
def fig1_runs():
    out = {}
    for seed in range(5):
        t0 = time.perf_counter()
        hist = solver.run_training(bm.gaussian_1d(), solver.SolverConfig(seed=seed, **FIG1_CONFIG))
        out[seed] = (hist, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def sweep_runs():
    t0 = time.perf_counter()
    cfg = {"problem": {"kind": "gaussian2d"}}
    results = cli.run_sweep(cfg, SWEEP_GRID, base=solver.SolverConfig(**SWEEP_SOLVER))
    return results, time.perf_counter() - t0


def _fig1_numbers(hist):
    at = [r for r in hist.rows if r.iteration == hist.perturbed_at]
    before, after = at[0], at[1]
    return before.map_l2, after.pot_grad_mse, hist.final().map_l2


def test_criterion_07_gaussian_1d_convergence(fig1_runs):
    hist, elapsed = fig1_runs[0]
    pre, pg_after, final = _fig1_numbers(hist)
    ok = (not hist.aborted and pre < 0.01 and final < 2 * pre and pg_after > 10 * pre
          and elapsed < 300)
    others = "; ".join(f"seed {s}: pre={_fig1_numbers(h)[0]:.4f} final={_fig1_numbers(h)[2]:.4f} "
                       f"pg/ml2={_fig1_numbers(h)[1] / _fig1_numbers(h)[0]:.0f}"
                       for s, (h, _) in fig1_runs.items() if s)
    record_criterion(7, ok, f"seed 0: map-l2 at 2000={pre:.5f} (<0.01), after +1000={final:.5f} "
                            f"(<{2 * pre:.5f}), pot-grad-mse after noise={pg_after:.4f} "
                            f"(>{10 * pre:.4f}), {elapsed:.0f}s  [other seeds: {others}]")
    assert ok


def test_criterion_08_timescale_sweep(sweep_runs):
    results, elapsed = sweep_runs
    rows = cli.aggregate(results, SWEEP_GRID)
    kappa = [r["kappa"] for r in rows]
    rho_map = scipy.stats.spearmanr(kappa, [r["map_l2_mean"] for r in rows]).statistic
    rho_pot = scipy.stats.spearmanr(kappa, [r["pot_grad_mse_mean"] for r in rows]).statistic
    failed = sum(r["n_failed"] for r in rows)
    ok = rho_map <= -0.5 and rho_pot >= 0.5 and elapsed < 1800 and failed == 0
    table = " ".join(f"(K={r['K']},r={r['ratio']:g}:{r['map_l2_mean']:.3f}/{r['pot_grad_mse_mean']:.3f})"
                     for r in rows)
    record_criterion(8, ok, f"spearman(kappa, map-l2)={rho_map:+.2f} (need <= -0.5), "
                            f"spearman(kappa, pot-grad-mse)={rho_pot:+.2f} (need >= +0.5), "
                            f"{failed} failed cells, {elapsed:.0f}s; cells map/pot: {table}")
    assert ok


def test_criterion_09_stability_bound(fig1_runs, sweep_runs):
    results, _ = sweep_runs
    per_problem = {}
    fig1_C = [metrics.theorem4_check(h).constant for h, _ in fig1_runs.values()]
    sweep_C = [metrics.theorem4_check([row for r in results if r.seed == s for row in r.history.rows]).constant
               for s in SWEEP_GRID["seeds"]]
    per_problem["1D"] = fig1_C
    per_problem["2D"] = sweep_C
    ok = True
    parts = []
    for name, Cs in per_problem.items():
        Cs = np.array(Cs)
        spread = Cs.max() / Cs.min()
        ok = ok and bool(np.all(np.isfinite(Cs))) and spread < 5
        parts.append(f"{name}: C per seed {np.round(Cs, 3).tolist()}, max/min={spread:.2f}")
    # with a single C per problem (the max over seeds) every checkpoint obeys the bound
    for name, hists in (("1D", [h for h, _ in fig1_runs.values()]), ("2D", [r.history for r in results])):
        C = max(per_problem[name])
        for h in hists:
            for row in h.rows:
                ok = ok and row.map_l2 <= C * (row.flatness + row.dkr) + 1e-12
    record_criterion(9, ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------------------
# 10: ICNN benchmark pipeline replay, with an independent numpy ICNN
# ---------------------------------------------------------------------------

def _np_icnn(model, x):
    """Value and input gradient of an ICNN, written directly in numpy."""
    Ws = [W.value for W in model.skip_weights]
    Us = [U.value for U in model.hidden_weights]
    bs = [b.value for b in model.biases]
    pres, zs = [], []
    pre = x @ Ws[0].T + bs[0]
    pres.append(pre)
    z = np.logaddexp(0, pre)
    for k in range(1, len(Ws)):
        pre = x @ Ws[k].T + bs[k] + z @ Us[k - 1].T
        pres.append(pre)
        z = pre if k == len(Ws) - 1 else np.logaddexp(0, pre)
    value = model.scale * (z[:, 0] + 0.5 * model.alpha * np.sum(x * x, 1))
    # backward by hand
    g_pre = np.ones((len(x), 1))
    gx = g_pre @ Ws[-1]
    for k in range(len(Ws) - 2, -1, -1):
        g_z = g_pre @ Us[k]
        g_pre = g_z / (1 + np.exp(-pres[k]))
        gx = gx + g_pre @ Ws[k]
    return value, model.scale * (gx + model.alpha * x)


def test_criterion_10_icnn_pipeline_replay(tmp_path):
    mix, icfg = bm.MixtureSpec(dim=16, components=8), bm.IcnnConfig()
    problem = bm.make_icnn_benchmark(mix, icfg)
    phi = problem.phi_model

    # calibration: a = sqrt(E|X|^2) / sqrt(E|grad Phi0|^2) on the same 4096 draws
    phi0 = models.clone(phi)
    phi0.scale = 1.0
    x_cal = bm.build_mixture(mix)(4096, np.random.default_rng([mix.seed, icfg.seed, 1]))
    _, g0 = _np_icnn(phi0, x_cal)
    a = np.sqrt(np.mean(np.sum(x_cal ** 2, 1))) / np.sqrt(np.mean(np.sum(g0 ** 2, 1)))
    calib_err = abs(a - problem.meta["calibration_scale"])

    # exported pairs, read back from disk
    out = bm.export_benchmark(problem, tmp_path / "bench", seed=0, n_split=512)
    x, y = bm.read_pairs(out / "pairs_test.csv")
    _, gx = _np_icnn(models.load_model(out / "phi.model"), x)
    pair_err = float(np.max(np.abs(gx - y)))

    # inverse map: recover grad Phi*(y) = argmax_x <x, y> - Phi(x) by optimization
    inv_err, recov_err = 0.0, 0.0
    for xi, yi in zip(x, y):
        def neg(v, yi=yi):
            val, g = _np_icnn(phi, v[None, :])
            return val[0] - v @ yi, g[0] - yi
        res = scipy.optimize.minimize(neg, yi / (phi.scale * (1 + phi.alpha)), jac=True,
                                      method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 0, "maxiter": 5000})
        xh = res.x
        inv_err = max(inv_err, float(np.max(np.abs(_np_icnn(phi, xh[None, :])[1][0] - yi))))
        recov_err = max(recov_err, float(np.max(np.abs(xh - xi))))
    pp = bm.potential_records(x, y, problem.ground_truth.phi(x))
    fy = float(np.max(np.abs(problem.ground_truth.T(pp.grad_phi_conj) - y)))

    ok = calib_err < 1e-9 and pair_err < 1e-9 and inv_err < 1e-6 and fy < 1e-6
    record_criterion(10, ok, f"|a - recomputed a|={calib_err:.1e}, max|grad Phi(x) - y|={pair_err:.1e}, "
                             f"max|grad Phi(grad Phi*(y)) - y|={inv_err:.1e} (recovered x within {recov_err:.1e}), "
                             f"stored diagnostics {fy:.1e}, 512 pairs, a={a:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 11: assignment exactness
# ---------------------------------------------------------------------------

def test_criterion_11_assignment_exactness():
    rng = np.random.default_rng(1111)
    mismatches, ulp_1d = 0, 0.0
    for k in range(100):
        n = 1 + k % 8
        rows = np.arange(n)
        perms = np.array(list(itertools.permutations(range(n))))

        # solve_assignment against the best permutation of the cost matrix
        inst = DiscreteInstance.random(n, 1 + k % 3, rng)
        C = inst.cost_matrix
        best = perms[np.argmin(C[rows, perms].sum(1))]
        mismatches += int(oracle.solve_assignment(inst).cost != float(np.mean(C[rows, best])))

        # empirical_dkr against the best permutation of the distance matrix.  On the
        # line |x - y| has structural ties (many optimal matchings whose float sums
        # differ in the last bit), so exact equality is required in dims 2 and 3 and
        # the 1D comparison is reported in ulps.
        dim = 1 + k % 3
        a, b = rng.uniform(-3, 3, (n, dim)), rng.uniform(-3, 3, (n, dim))
        D = np.sqrt(np.maximum(np.sum((a[:, None, :] - b[None, :, :]) ** 2, -1), 0.0))
        ref = float(D[rows, perms[np.argmin(D[rows, perms].sum(1))]].sum() / n)
        got = metrics.empirical_dkr(a, b)
        if dim == 1:
            ulp_1d = max(ulp_1d, abs(got - ref) / np.spacing(ref))
        else:
            mismatches += int(got != ref)
    ok = mismatches == 0 and ulp_1d <= 8
    record_criterion(11, ok, f"{mismatches} mismatches in 167 exact comparisons (n = 1..8); "
                             f"1D W1 within {ulp_1d:.0f} ulp of brute force")
    assert ok
