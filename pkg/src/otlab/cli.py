"""``otlab`` command line: generate, train, sweep, oracle, report.

Every command reads an optional JSON config (see ``config.schema.json``)
and writes into ``--out``.  Exit codes: 0 success, 2 configuration error,
3 divergence abort, 4 oracle failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, benchmarks, models, oracle, plots, solver

log = logging.getLogger("otlab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ORACLE = 0, 2, 3, 4
ORACLE_TOL = 1e-9

# Desk-scale defaults: 2D Gaussians, the source grid with 5 seeds.
DEFAULT_CONFIG = {"problem": {"kind": "gaussian2d"}}
DEFAULT_GRID = {"K": [1, 2, 5, 10, 20], "ratios": [0.02, 0.05, 0.1, 0.25, 0.5, 1.0],
                "eta_t": 5e-4, "seeds": [0, 1, 2, 3, 4]}
SWEEP_COLUMNS = ["K", "ratio", "kappa", "n_ok", "n_failed", "map_l2_mean", "map_l2_std",
                 "pot_grad_mse_mean", "pot_grad_mse_std"]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def config_schema() -> dict:
    return json.loads(resources.files("otlab").joinpath("config.schema.json").read_text())


def validate_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    return cfg


def load_config(path: str | None) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return validate_config(cfg)


def solver_config(cfg: dict, seed: int, **overrides) -> solver.SolverConfig:
    fields = dict(cfg.get("solver", {}))
    if "eval_every" in cfg.get("output", {}):
        fields["eval_every"] = cfg["output"]["eval_every"]
    fields["seed"] = seed
    fields.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return solver.SolverConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver section: {exc}") from None


def build_problem(cfg: dict) -> benchmarks.BenchmarkProblem:
    section = {k: v for k, v in cfg["problem"].items() if k != "n_split"}
    try:
        return benchmarks.problem_from_config(section)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"problem section: {exc}") from None


def prepare_out(out: str | Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cell_seed(seed: int, K: int, ratio: float) -> int:
    """Per-cell seed from (seed, K, ratio); independent of execution order."""
    digest = hashlib.sha256(f"{int(seed)}|{int(K)}|{float(ratio)!r}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


# ---------------------------------------------------------------------------
# generate / train
# ---------------------------------------------------------------------------

def generate(cfg: dict, out: Path, seed: int) -> dict:
    problem = build_problem(cfg)
    n_split = cfg["problem"].get("n_split", 2048)
    benchmarks.export_benchmark(problem, out, seed, n_split,
                                extra_meta={"config": cfg, "otlab_version": __version__})
    return json.loads((out / "meta.json").read_text())


def train(cfg: dict, out: Path, config: solver.SolverConfig,
          problem: benchmarks.BenchmarkProblem | None = None) -> solver.TrainHistory:
    """One training run; writes history.csv, the two models and meta.json."""
    problem = problem or build_problem(cfg)
    state = solver.init_state(problem, config)
    hist = solver.run_training(problem, config, state)
    hist.to_csv(out / "history.csv")
    models.save_model(state.t, out / "map.model")
    models.save_model(state.potential, out / "potential.model")
    final = hist.final()
    meta = {"config": cfg, "solver": config.to_dict(), "kappa": solver.kappa(config),
            "problem": problem.meta, "aborted": hist.aborted, "abort_reason": hist.abort_reason,
            "perturbed_at": hist.perturbed_at, "iterations_done": state.iteration,
            "final": {k: getattr(final, k) for k in solver.HISTORY_HEADER if k != "wall_ms"},
            "map_digest": solver.parameter_digest(state.t),
            "potential_digest": solver.parameter_digest(state.potential),
            "otlab_version": __version__}
    write_json(out / "meta.json", meta)
    return hist


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    K: int
    ratio: float
    seed: int
    cell_seed: int
    history: solver.TrainHistory
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error and not self.history.aborted


def _run_cell(args) -> CellResult:
    cfg, base, K, ratio, seed, out = args
    cseed = cell_seed(seed, K, ratio)
    config = solver.SolverConfig.from_dict({**base, "K": K, "eta_psi": base["eta_t"] * ratio,
                                            "seed": cseed})
    try:
        if out is not None:
            cdir = Path(out)
            cdir.mkdir(parents=True, exist_ok=True)
            hist = train(cfg, cdir, config)
        else:
            hist = solver.run_training(build_problem(cfg), config)
        return CellResult(K, ratio, seed, cseed, hist)
    except Exception as exc:  # a broken cell is flagged, the sweep goes on
        return CellResult(K, ratio, seed, cseed, solver.TrainHistory(), f"{type(exc).__name__}: {exc}")


def resolve_grid(cfg: dict, n_seeds: int | None = None) -> dict:
    grid = {**DEFAULT_GRID, **cfg.get("sweep", {})}
    if n_seeds is not None:
        grid["seeds"] = list(range(n_seeds))
    if not all(grid[k] for k in ("K", "ratios", "seeds")) or min(grid["ratios"]) <= 0:
        raise ConfigError("sweep grid needs non-empty K, ratios and seeds, with ratios > 0")
    return grid


def run_sweep(cfg: dict, grid: dict, out: Path | None = None, jobs: int = 1,
              base: solver.SolverConfig | None = None) -> list[CellResult]:
    """Train every (K, ratio, seed) cell; ``eta_psi = ratio * eta_t``."""
    base = (base or solver_config(cfg, 0)).to_dict()
    base["eta_t"] = grid["eta_t"]
    tasks = []
    for K, ratio, seed in itertools.product(grid["K"], grid["ratios"], grid["seeds"]):
        cdir = None if out is None else Path(out) / "cells" / f"K{K}_r{ratio:g}_s{seed}"
        tasks.append((cfg, base, K, ratio, seed, cdir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    if out is not None:
        write_sweep_outputs(Path(out), cfg, grid, base, results)
    return results


def aggregate(results: list[CellResult], grid: dict) -> list[dict]:
    rows = []
    for K, ratio in itertools.product(grid["K"], grid["ratios"]):
        cell = [r for r in results if r.K == K and r.ratio == ratio]
        ok = [r for r in cell if r.ok]
        ml2 = np.array([r.history.final().map_l2 for r in ok])
        pg = np.array([r.history.final().pot_grad_mse for r in ok])
        nan = float("nan")
        rows.append({"K": K, "ratio": ratio, "kappa": K / ratio, "n_ok": len(ok),
                     "n_failed": len(cell) - len(ok),
                     "map_l2_mean": float(ml2.mean()) if len(ok) else nan,
                     "map_l2_std": float(ml2.std()) if len(ok) else nan,
                     "pot_grad_mse_mean": float(pg.mean()) if len(ok) else nan,
                     "pot_grad_mse_std": float(pg.std()) if len(ok) else nan})
    return rows


def write_sweep_outputs(out: Path, cfg: dict, grid: dict, base: dict, results: list[CellResult]):
    rows = aggregate(results, grid)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    cells = [{"K": r.K, "ratio": r.ratio, "seed": r.seed, "cell_seed": r.cell_seed,
              "ok": r.ok, "error": r.error or r.history.abort_reason} for r in results]
    write_json(out / "meta.json", {"config": cfg, "grid": grid, "solver": base, "cells": cells,
                                   "otlab_version": __version__})


# ---------------------------------------------------------------------------
# oracle suite
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    worst: float
    count: int

    @property
    def passed(self) -> bool:
        return self.worst <= ORACLE_TOL


def _brute_force(C: np.ndarray) -> float:
    n = C.shape[0]
    return min(C[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))


def oracle_suite(n_instances: int = 20, sizes=(4, 8, 16, 64), dims=(1, 2, 8), seed: int = 0,
                 psi_trials: int = 200, inject_suboptimal: bool = False) -> list[CheckResult]:
    """Run every discrete witness on random instances; residuals should all be <= 1e-9."""
    if max(sizes) > oracle.MAX_POINTS:
        raise ConfigError(f"instance sizes must be <= {oracle.MAX_POINTS}")
    rng = np.random.default_rng(seed)
    worst: dict[str, list] = {}

    def record(name, value):
        worst.setdefault(name, []).append(float(value))

    for k in range(n_instances):
        inst = oracle.DiscreteInstance.random(sizes[k % len(sizes)], dims[k % len(dims)], rng)
        C, n = inst.cost_matrix, inst.n
        sol = oracle.solve_assignment(inst)
        psi = sol.duals.psi.copy()
        if inject_suboptimal:
            psi[0] += 1e-3 + abs(psi[0]) * 1e-3
        record("strong duality |semidual(psi) - K*|", abs(oracle.semidual_value(psi, inst) - sol.cost))
        record("dual feasibility", sol.duals.max_violation(C))
        slack = sol.duals.phi + sol.duals.psi[sol.perm] - C[np.arange(n), sol.perm]
        record("complementary slackness", np.max(np.abs(slack)))
        weak = max(oracle.semidual_value(rng.normal(0, 3, n), inst) for _ in range(psi_trials))
        record("weak duality max(semidual - K*)", max(weak - sol.cost, 0.0))
        record("flatness spread at optimal map", oracle.flatness_witness(inst, sol.perm, 20, rng))
        record("c-concavity gap of duals", abs(oracle.cconcavity_gap(sol.duals.psi, inst)))
        record("c-concavity gap >= 0", max(-oracle.cconcavity_gap(rng.normal(0, 3, n), inst), 0.0))
        t = rng.integers(0, n, n)
        if oracle.is_bijection(t, n):
            t[0] = t[1] if n > 1 else t[0]
        if not oracle.is_bijection(t, n):
            Ms = (0.0, 1.0, 10.0, 100.0)
            w = oracle.unboundedness_witness(inst, t, Ms)
            record("unboundedness F(M 1_A) >= F(0) + M sigma(A)",
                   max(max(w.values[0] + M * w.mass - v for M, v in zip(Ms[1:], w.values[1:])), 0.0))

    for _ in range(max(1, n_instances // 4)):
        inst = oracle.DiscreteInstance.random(7, 2, rng)
        record("n=7 brute force |K* - min over permutations|",
               abs(oracle.solve_assignment(inst).cost - _brute_force(inst.cost_matrix)))
    return [CheckResult(name, max(v), len(v)) for name, v in worst.items()]


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def report(path: Path) -> list[Path]:
    """SVGs for a run directory (history.csv) or a sweep directory (sweep.csv)."""
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text()) if (path / "meta.json").exists() else {}
    if (path / "sweep.csv").exists():
        grid = meta.get("grid")
        if not grid:
            raise ConfigError(f"{path}/meta.json lacks the sweep grid")
        with open(path / "sweep.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        missing = set(SWEEP_COLUMNS) - set(rows[0] if rows else {})
        if not rows or missing:
            raise ConfigError(f"{path}/sweep.csv is empty or lacks columns {sorted(missing)}")
        lookup = {(int(r["K"]), float(r["ratio"])): r for r in rows}
        written = []
        for col, title in (("map_l2_mean", "Map error"), ("pot_grad_mse_mean", "Potential gradient error")):
            vals = np.array([[float(lookup[(K, float(q))][col]) for q in grid["ratios"]]
                             for K in grid["K"]])
            written.append(plots.sweep_heatmap(vals, grid["K"], grid["ratios"],
                                               path / f"heatmap_{col.rsplit('_', 1)[0]}.svg", title))
        return written
    if not (path / "history.csv").exists():
        raise ConfigError(f"{path} has neither history.csv nor sweep.csv")
    try:
        hist = solver.TrainHistory.from_csv(path / "history.csv")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if len(hist) == 0:
        raise ConfigError(f"{path}/history.csv has no rows")
    title = f"kappa = {meta['kappa']:g}" if "kappa" in meta else ""
    return [plots.run_figure(hist, path / "run.svg", meta.get("perturbed_at"), title)]


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--out", metavar="DIR", required=out_required)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="write into a non-empty --out")

    common(sub.add_parser("generate", help="sample a benchmark and write its pairs"))
    sp = sub.add_parser("train", help="one training run")
    common(sp)
    sp.add_argument("--outer", type=int, help="outer iterations (overrides the config)")
    sp.add_argument("--perturb-psi-at", type=int)
    sp.add_argument("--extra-steps", type=int)
    sp = sub.add_parser("sweep", help="K x (eta_psi/eta_t) grid over several seeds")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    sp.add_argument("--outer", type=int)
    sp = sub.add_parser("oracle", help="verify the discrete duality witnesses")
    common(sp, out_required=False)
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--sizes", type=int, nargs="+", default=[4, 8, 16, 64])
    sp.add_argument("--inject-suboptimal", action="store_true",
                    help="perturb one dual value; the suite must then fail")
    sp = sub.add_parser("report", help="SVG plots for a run or sweep directory")
    sp.add_argument("path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"otlab: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args) -> int:
    if args.command == "report":
        for f in report(Path(args.path)):
            print(f)
        return EXIT_OK

    if args.command == "oracle":
        checks = oracle_suite(args.instances, tuple(args.sizes), seed=args.seed or 0,
                              inject_suboptimal=args.inject_suboptimal)
        lines = [f"{'check':<50} {'max residual':>14} {'n':>4}  status"]
        lines += [f"{c.name:<50} {c.worst:>14.3e} {c.count:>4}  {'PASS' if c.passed else 'FAIL'}"
                  for c in checks]
        print("\n".join(lines))
        if args.out:
            out = prepare_out(args.out, args.force)
            (out / "oracle.txt").write_text("\n".join(lines) + "\n")
        return EXIT_OK if all(c.passed for c in checks) else EXIT_ORACLE

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = prepare_out(args.out, args.force)

    if args.command == "generate":
        meta = generate(cfg, out, seed)
        print(f"wrote {out} ({meta['problem']['kind']}, dim {meta['dim']})")
        return EXIT_OK

    if args.command == "train":
        config = solver_config(cfg, seed, outer_iterations=args.outer,
                               perturb_psi_at=args.perturb_psi_at, extra_steps=args.extra_steps)
        hist = train(cfg, out, config)
        f = hist.final()
        print(f"iteration {f.iteration}: map_l2={f.map_l2:.4g} pot_grad_mse={f.pot_grad_mse:.4g} "
              f"flatness={f.flatness:.4g}")
        if hist.aborted:
            print(f"otlab: run aborted: {hist.abort_reason}", file=sys.stderr)
            return EXIT_DIVERGED
        return EXIT_OK

    # sweep
    grid = resolve_grid(cfg, args.seeds)
    base = solver_config(cfg, seed, outer_iterations=args.outer)
    results = run_sweep(cfg, grid, out, max(1, args.jobs), base)
    failed = [r for r in results if not r.ok]
    for r in failed:
        log.warning("cell K=%s ratio=%s seed=%s failed: %s", r.K, r.ratio, r.seed,
                    r.error or r.history.abort_reason)
    print(f"wrote {out / 'sweep.csv'} ({len(results)} runs, {len(failed)} failed)")
    if failed and len(failed) == len(results):
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
