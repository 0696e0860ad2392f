"""
Timescale sweep on 2D Gaussians
===============================

N(0, I) -> N(1, 4 I).  Each cell fixes K and the ratio eta_psi / eta_t,
trains a few seeds and records the final map and potential-gradient errors
against kappa = K eta_t / eta_psi.  The defaults are a quick pass; the
acceptance suite runs K in {1,5,10,15,20}, ratios {1, 0.1, 0.01}, 5 seeds.
"""

import argparse
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from otlab import cli, plots, solver

ap = argparse.ArgumentParser()
ap.add_argument("--outer", type=int, default=200)
ap.add_argument("--seeds", type=int, default=2)
ap.add_argument("--jobs", type=int, default=1)
ap.add_argument("--out", default="demo_out")
args = ap.parse_args()

grid = {"K": [1, 5, 20], "ratios": [1.0, 0.1, 0.01], "eta_t": 3e-3, "seeds": list(range(args.seeds))}
base = solver.SolverConfig(outer_iterations=args.outer, batch_size=128, eval_every=args.outer,
                           flatness_batch=2048, map_hidden=(32, 32, 32),
                           potential_hidden=(32, 32, 32), potential_arch="mlp")
results = cli.run_sweep({"problem": {"kind": "gaussian2d"}}, grid, jobs=args.jobs, base=base)
rows = cli.aggregate(results, grid)

print(f"{'K':>3} {'ratio':>6} {'kappa':>7} {'map_l2':>9} {'pot_grad':>9}")
for r in rows:
    print(f"{r['K']:>3} {r['ratio']:>6g} {r['kappa']:>7g} {r['map_l2_mean']:>9.4f} "
          f"{r['pot_grad_mse_mean']:>9.4f}")
kappa = [r["kappa"] for r in rows]
print("spearman(kappa, map_l2)   =", round(spearmanr(kappa, [r["map_l2_mean"] for r in rows]).statistic, 2))
print("spearman(kappa, pot_grad) =", round(spearmanr(kappa, [r["pot_grad_mse_mean"] for r in rows]).statistic, 2))

out = Path(args.out)
out.mkdir(exist_ok=True)
vals = np.array([[r["map_l2_mean"] for r in rows if r["K"] == K] for K in grid["K"]])
print("heatmap:", plots.sweep_heatmap(vals, grid["K"], grid["ratios"], out / "sweep_map_l2.svg", "Map error"))
