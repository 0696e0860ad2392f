"""Two-timescale alternating optimization of the saddle objectives.

One outer iteration takes ``K`` descent steps on the map with the potential
frozen, then a single step on the potential with the map frozen.  The ratio
``kappa = K * eta_t / eta_psi`` sets how much faster the map moves.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import metrics
from . import models
from . import numcore as nc
from .benchmarks import BenchmarkProblem, potential_records
from .objectives import (CostFn, ObjectiveKind, SemiDualPotential, Variant,
                         maxcorr_value, otm_penalty, semi_dual_value)

log = logging.getLogger(__name__)

HISTORY_HEADER = ["iteration", "F", "map_l2", "map_cos", "pot_mse", "pot_grad_mse",
                  "flatness", "dkr", "wall_ms"]
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    method: ObjectiveKind = field(default_factory=lambda: ObjectiveKind.of("otp"))
    K: int = 10
    eta_t: float = 1e-3
    eta_psi: float = 1e-3
    outer_iterations: int = 2000
    batch_size: int = 256
    optimizer: str = "adam"
    seed: int = 0
    eval_every: int = 100
    eval_batch: int = 512
    flatness_batch: int = 8192        # F is a sample mean; a large batch keeps its noise well below C*
    map_hidden: tuple = (128, 128, 128)
    potential_hidden: tuple = (128, 128, 128)
    potential_arch: str = "auto"      # "auto" | "mlp" | "icnn"
    cost_scaling: str = "half"
    perturb_psi_at: Optional[int] = None
    perturb_noise: float = 0.1        # noise std as a fraction of each parameter tensor's std
    extra_steps: int = 0

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = ObjectiveKind.of(self.method)
        self.map_hidden = tuple(self.map_hidden)
        self.potential_hidden = tuple(self.potential_hidden)
        if self.K < 1 or self.eta_t < 0 or self.eta_psi < 0 or self.outer_iterations < 0:
            raise ValueError("need K >= 1, nonnegative rates and iteration count")
        if min(self.batch_size, self.eval_every, self.eval_batch, self.flatness_batch) < 1:
            raise ValueError("batch sizes and eval cadence must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.potential_arch not in ("auto", "mlp", "icnn"):
            raise ValueError(f"unknown potential architecture {self.potential_arch!r}")

    @property
    def cost(self) -> CostFn:
        return CostFn(2.0, scaling=self.cost_scaling)

    @property
    def uses_icnn(self) -> bool:
        if self.potential_arch != "auto":
            return self.potential_arch == "icnn"
        return self.method.variant is not Variant.MONGE_MAP

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["method"] = self.method.variant.value
        d["map_hidden"] = list(self.map_hidden)
        d["potential_hidden"] = list(self.potential_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**d)


def kappa(config: SolverConfig) -> float:
    return config.K * config.eta_t / config.eta_psi


# ---------------------------------------------------------------------------
# Optimizers over lists of parameter nodes
# ---------------------------------------------------------------------------

class Sgd:
    def __init__(self, params, lr):
        self.params, self.lr = list(params), lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p.value = p.value - self.lr * g


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params, self.lr = list(params), lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.value = p.value - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def make_optimizer(kind: str, params, lr):
    return Adam(params, lr) if kind == "adam" else Sgd(params, lr)


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: SolverConfig
    t: object                 # map model
    potential: object         # MLP psi, or convex v for ICNN-based variants
    rng: np.random.Generator
    problem: Optional[BenchmarkProblem] = None
    iteration: int = 0

    def __post_init__(self):
        self.map_opt = make_optimizer(self.config.optimizer, self.t.parameters(), self.config.eta_t)
        self.pot_opt = make_optimizer(self.config.optimizer, self.potential.parameters(),
                                      self.config.eta_psi)

    @property
    def convex_potential(self) -> bool:
        return isinstance(self.potential, models.IcnnModel)

    @property
    def psi(self):
        """The potential as a semi-dual (c-concave side) function of y."""
        return SemiDualPotential(self.potential) if self.convex_potential else self.potential

    def sample(self, n: int):
        return self.problem.sample_source(n, self.rng), self.problem.sample_target(n, self.rng)


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def init_state(problem: BenchmarkProblem, config: SolverConfig) -> TrainState:
    map_seed, pot_seed, data_seed = _seeds(config.seed, 3)
    d = problem.dim
    t = models.default_mlp(d, d, map_seed, hidden=config.map_hidden)
    if config.uses_icnn:
        width = config.potential_hidden
        pot = models.init_model("icnn", [d, *width], 0.1, pot_seed)
    else:
        pot = models.default_mlp(d, 1, pot_seed, hidden=config.potential_hidden, potential=True)
    return TrainState(config, t, pot, np.random.default_rng(data_seed), problem)


# ---------------------------------------------------------------------------
# Losses in minimization form
# ---------------------------------------------------------------------------

def map_loss(state: TrainState, x) -> nc.Node:
    """Terms of the objective that depend on the map, signed for descent."""
    cfg = state.config
    x = nc.constant(x)
    if cfg.method.variant.is_semi_dual:
        tx = state.t(x)
        return nc.subtract(nc.mean(cfg.cost.rows(x, tx)), nc.mean(state.psi(tx)))
    tx = state.t(x)
    corr = nc.mean(nc.sum(nc.mul(x, tx), axis=1))
    loss = nc.subtract(nc.mean(state.potential(tx)), corr)
    if cfg.method.penalty_weight:
        pen = otm_penalty(state.t, state.potential, x)
        loss = nc.add(loss, nc.scale(pen, cfg.method.penalty_weight))
    return loss


def objective_value(state: TrainState, x, y) -> nc.Node:
    """The variant's own saddle functional (F for semi-dual, F~ for max-correlation)."""
    if state.config.method.variant.is_semi_dual:
        return semi_dual_value(state.t, state.psi, x, y, state.config.cost)
    return maxcorr_value(state.t, state.potential, x, y)


def potential_loss(state: TrainState, x, y) -> nc.Node:
    val = objective_value(state, x, y)
    # semi-dual: psi ascends F; max-correlation: v descends F~
    return nc.scale(val, -1.0) if state.config.method.variant.is_semi_dual else val


def _check_finite(grads, who: str):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {who} step")


def inner_map_steps(state: TrainState, config: SolverConfig | None = None, batches=None) -> TrainState:
    """K descent steps on the map; ``batches`` optionally supplies the x-batches."""
    config = config or state.config
    params = state.t.parameters()
    for k in range(config.K):
        x = batches[k] if batches is not None else state.problem.sample_source(config.batch_size, state.rng)
        loss = map_loss(state, x)
        grads = nc.grad(loss, params)
        _check_finite(grads, "map")
        state.map_opt.step(grads)
    return state


def potential_step(state: TrainState, config: SolverConfig | None = None, batch=None) -> float:
    """One potential update; returns the objective value before the step."""
    config = config or state.config
    x, y = batch if batch is not None else state.sample(config.batch_size)
    loss = potential_loss(state, x, y)
    value = -float(loss.value) if config.method.variant.is_semi_dual else float(loss.value)
    if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"objective left the finite range: {value:.3g}")
    params = state.potential.parameters()
    grads = nc.grad(loss, params)
    _check_finite(grads, "potential")
    state.pot_opt.step(grads)
    if state.convex_potential:
        models.project_nonneg(state.potential)
    return value


def perturb_potential(state: TrainState, noise: float, rng) -> None:
    """Add Gaussian noise, std = ``noise`` x (std of each parameter tensor)."""
    for p in state.potential.parameters():
        s = float(np.std(p.value))
        if s > 0:
            p.value = p.value + rng.normal(0.0, noise * s, p.shape)
    if state.convex_potential:
        models.project_nonneg(state.potential)


# ---------------------------------------------------------------------------
# History
# ---------------------------------------------------------------------------

@dataclass
class HistoryRow:
    iteration: int
    F: float
    map_l2: float
    map_cos: float
    pot_mse: float
    pot_grad_mse: float
    flatness: float
    dkr: float
    wall_ms: float

    def as_list(self):
        return [getattr(self, k) for k in HISTORY_HEADER]


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""
    perturbed_at: Optional[int] = None

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def final(self) -> HistoryRow:
        return self.rows[-1]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.rows:
            w.writerow([r.iteration] + [repr(float(v)) for v in r.as_list()[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != HISTORY_HEADER:
            missing = set(HISTORY_HEADER) - set(rows[0] if rows else [])
            raise ValueError(f"{path}: history header mismatch (missing {sorted(missing)})")
        out = cls()
        for r in rows[1:]:
            out.rows.append(HistoryRow(int(r[0]), *map(float, r[1:])))
        return out


class Evaluator:
    """Fixed held-out batches and the metrics computed on them."""

    def __init__(self, problem: BenchmarkProblem, config: SolverConfig, seed: int):
        rng = np.random.default_rng(seed)
        n = config.eval_batch
        gt = problem.ground_truth
        self.gt = gt
        self.cost = config.cost
        self.x = problem.sample_source(n, rng)
        xb, yb = problem.pairs(n, rng)
        self.pairs = potential_records(xb, yb, gt.phi(xb))
        self.optimal_cost = gt.cost_under(self.cost)
        self.x_F = problem.sample_source(config.flatness_batch, rng)
        self.y_F = problem.sample_target(config.flatness_batch, rng)

    def __call__(self, state: TrainState, iteration: int, wall_ms: float) -> HistoryRow:
        t, psi = state.t, state.psi
        y = self.pairs.y
        with nc.no_grad():
            F = float(semi_dual_value(t, psi, self.x_F, self.y_F, self.cost).value)
            tx = t(nc.constant(self.x)).value
        return HistoryRow(
            iteration=iteration, F=F,
            map_l2=metrics.map_l2_error(t, self.gt.T, self.x),
            map_cos=metrics.map_cosine(t, self.gt.T, self.x),
            pot_mse=metrics.centered_potential_mse(psi, self.pairs.psi, y),
            pot_grad_mse=metrics.potential_grad_mse(psi, self.pairs.grad_psi, y),
            flatness=abs(F - self.optimal_cost),
            dkr=metrics.empirical_dkr(tx, y),
            wall_ms=wall_ms)


def parameter_digest(model) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def run_training(problem: BenchmarkProblem, config: SolverConfig,
                 state: TrainState | None = None) -> TrainHistory:
    """Alternate map and potential updates, logging metrics every ``eval_every``.

    Runs ``outer_iterations + extra_steps`` iterations.  When
    ``perturb_psi_at`` is set the potential receives parameter noise after
    that many iterations; the history then holds two rows for that
    iteration, before and after the noise.
    """
    if problem.ground_truth is None:
        raise ValueError("training metrics need a problem with ground truth")
    state = state or init_state(problem, config)
    eval_seed, noise_seed = _seeds(config.seed + 7919, 2)
    evaluate = Evaluator(problem, config, eval_seed)
    noise_rng = np.random.default_rng(noise_seed)
    total = config.outer_iterations + config.extra_steps
    hist = TrainHistory()
    t0 = time.perf_counter()

    def log_row(it):
        hist.rows.append(evaluate(state, it, (time.perf_counter() - t0) * 1e3))

    log_row(0)
    try:
        for it in range(1, total + 1):
            inner_map_steps(state, config)
            potential_step(state, config)
            state.iteration = it
            if it % config.eval_every == 0 or it == total:
                log_row(it)
            if config.perturb_psi_at is not None and it == config.perturb_psi_at:
                if hist.rows[-1].iteration != it:
                    log_row(it)
                perturb_potential(state, config.perturb_noise, noise_rng)
                hist.perturbed_at = it
                log_row(it)
    except DivergenceError as exc:
        hist.aborted, hist.abort_reason = True, str(exc)
        log.warning("run aborted at iteration %d: %s", state.iteration, exc)
    return hist
