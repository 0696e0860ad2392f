"""Benchmark problems with known optimal maps.

Two families:

* diagonal Gaussian pairs, where the quadratic-cost optimal map is the
  coordinatewise affine rescaling;
* a Gaussian-mixture source pushed through the gradient of a random convex
  network, ``nu = (grad Phi)#mu``, so ``grad Phi`` is optimal by construction.

In both cases the ground truth is a convex potential ``Phi`` with ``T* =
grad Phi``; target-side potentials are recovered on paired samples
``(x, y = T*(x))`` through ``Phi*(y) = <x, y> - Phi(x)``.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import softmax

from . import models
from .models import IcnnModel
from .objectives import HALF_SQUARED, SQUARED, CostFn


@dataclass(frozen=True)
class GaussianSpec:
    mean: tuple
    std: tuple

    def __post_init__(self):
        mean = tuple(float(m) for m in np.atleast_1d(self.mean))
        std = tuple(float(s) for s in np.atleast_1d(self.std))
        if len(std) == 1 and len(mean) > 1:
            std = std * len(mean)
        if len(mean) != len(std):
            raise ValueError("mean and std lengths differ")
        if any(s <= 0 for s in std):
            raise ValueError("std entries must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return len(self.mean)


def sample_gaussian(spec: GaussianSpec, n: int, rng) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.asarray(spec.mean) + np.asarray(spec.std) * rng.standard_normal((n, spec.dim))


@dataclass
class GroundTruth:
    """Optimal map data for a benchmark, all under quadratic cost.

    ``phi``/``grad_phi`` give the convex Brenier potential; ``inverse`` is
    the inverse map when it is available in closed form.  ``optimal_cost``
    is E|x - T*(x)|^2 (unit scaling); ``optimal_cost_se`` its Monte-Carlo
    standard error (0 when exact).
    """

    phi: Callable[[np.ndarray], np.ndarray]
    grad_phi: Callable[[np.ndarray], np.ndarray]
    optimal_cost: float
    optimal_cost_se: float = 0.0
    inverse: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def T(self, x) -> np.ndarray:
        return self.grad_phi(np.asarray(x, dtype=np.float64))

    def cost_under(self, cost: CostFn) -> float:
        return SQUARED.convert(self.optimal_cost, cost)

    def psi(self, y) -> np.ndarray:
        """c-concave target potential psi*(y) = |y|^2/2 - Phi*(y) (needs the inverse)."""
        if self.inverse is None:
            raise ValueError("no closed-form inverse; use target_potential_pairs")
        y = np.asarray(y, dtype=np.float64)
        x = self.inverse(y)
        return 0.5 * np.sum(y * y, 1) - (np.sum(x * y, 1) - self.phi(x))

    def grad_psi(self, y) -> np.ndarray:
        if self.inverse is None:
            raise ValueError("no closed-form inverse; use target_potential_pairs")
        y = np.asarray(y, dtype=np.float64)
        return y - self.inverse(y)


@dataclass
class BenchmarkProblem:
    name: str
    dim: int
    sample_source: Callable[[int, np.random.Generator], np.ndarray]
    ground_truth: Optional[GroundTruth] = None
    meta: dict = field(default_factory=dict)
    phi_model: Optional[IcnnModel] = None

    def sample_target(self, n: int, rng) -> np.ndarray:
        return self.pairs(n, rng)[1]

    def pairs(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """Source samples and their images under the optimal map."""
        if self.ground_truth is None:
            raise ValueError(f"{self.name}: no ground truth")
        x = self.sample_source(n, rng)
        return x, self.ground_truth.T(x)


# ---------------------------------------------------------------------------
# Gaussian pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineMap:
    """Diagonal affine optimal map between Gaussians."""

    src: GaussianSpec
    dst: GaussianSpec

    @property
    def slope(self) -> np.ndarray:
        return np.asarray(self.dst.std) / np.asarray(self.src.std)

    @property
    def offset(self) -> np.ndarray:
        return np.asarray(self.dst.mean) - self.slope * np.asarray(self.src.mean)

    def __call__(self, x) -> np.ndarray:
        return self.offset + self.slope * np.asarray(x, dtype=np.float64)

    def inverse(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.offset) / self.slope

    def phi(self, x) -> np.ndarray:
        """Convex potential with gradient equal to the map."""
        x = np.asarray(x, dtype=np.float64)
        return np.sum(self.offset * x + 0.5 * self.slope * x * x, axis=-1)

    def phi_conj(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.sum((y - self.offset) ** 2 / (2.0 * self.slope), axis=-1)

    def psi(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return 0.5 * np.sum(y * y, axis=-1) - self.phi_conj(y)

    def optimal_cost(self, cost: CostFn = SQUARED) -> float:
        dm = np.asarray(self.dst.mean) - np.asarray(self.src.mean)
        ds = np.asarray(self.dst.std) - np.asarray(self.src.std)
        return SQUARED.convert(float(np.sum(dm ** 2 + ds ** 2)), cost)


def analytic_gaussian_map(src: GaussianSpec, dst: GaussianSpec) -> AffineMap:
    if not isinstance(src, GaussianSpec) or not isinstance(dst, GaussianSpec):
        raise TypeError("analytic maps are defined for diagonal GaussianSpec only")
    if src.dim != dst.dim:
        raise ValueError("dimension mismatch")
    return AffineMap(src, dst)


def gaussian_problem(src: GaussianSpec, dst: GaussianSpec, name: str = "gaussian") -> BenchmarkProblem:
    amap = analytic_gaussian_map(src, dst)
    gt = GroundTruth(phi=amap.phi, grad_phi=amap, optimal_cost=amap.optimal_cost(),
                     inverse=amap.inverse)
    meta = {"kind": name, "src_mean": list(src.mean), "src_std": list(src.std),
            "dst_mean": list(dst.mean), "dst_std": list(dst.std),
            "map_offset": amap.offset.tolist(), "map_slope": amap.slope.tolist(),
            "optimal_cost_sq": gt.optimal_cost}
    return BenchmarkProblem(name, src.dim, lambda n, rng: sample_gaussian(src, n, rng), gt, meta)


def gaussian_1d() -> BenchmarkProblem:
    """N(0, 1) -> N(2, 1.5^2); T*(x) = 2 + 1.5 x."""
    return gaussian_problem(GaussianSpec((0.0,), (1.0,)), GaussianSpec((2.0,), (1.5,)), "gaussian1d")


def gaussian_2d() -> BenchmarkProblem:
    """N(0, I) -> N(1, 4 I) in the plane; T*(x) = 1 + 2 x."""
    return gaussian_problem(GaussianSpec((0.0, 0.0), (1.0, 1.0)),
                            GaussianSpec((1.0, 1.0), (2.0, 2.0)), "gaussian2d")


# ---------------------------------------------------------------------------
# Mixture source + ICNN pushforward
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureSpec:
    dim: int = 16
    components: int = 8
    radius: float = 2.5
    weight_logit_std: float = 1.25
    component_scale: float = 0.35
    log_scale_std: float = 0.9
    seed: int = 0


@dataclass
class MixtureSampler:
    spec: MixtureSpec
    means: np.ndarray     # (J, d)
    weights: np.ndarray   # (J,)
    stds: np.ndarray      # (J, d) per-component coordinate std

    def sample(self, n: int, rng, return_labels: bool = False):
        labels = rng.choice(len(self.weights), size=n, p=self.weights)
        x = self.means[labels] + self.stds[labels] * rng.standard_normal((n, self.spec.dim))
        return (x, labels) if return_labels else x

    __call__ = sample


def build_mixture(spec: MixtureSpec) -> MixtureSampler:
    """Draw the mixture parameters; log-scales are mean-centred within each component."""
    rng = np.random.default_rng(spec.seed)
    dirs = rng.standard_normal((spec.components, spec.dim))
    means = spec.radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    weights = softmax(rng.normal(0.0, spec.weight_logit_std, spec.components))
    log_s = rng.normal(0.0, spec.log_scale_std, (spec.components, spec.dim))
    log_s -= log_s.mean(axis=1, keepdims=True)
    return MixtureSampler(spec, means, weights, spec.component_scale * np.exp(log_s))


@dataclass(frozen=True)
class IcnnConfig:
    depth: int = 5
    width: Optional[int] = None   # defaults to the data dimension
    init_std: float = 0.14
    alpha: float = 0.05
    seed: int = 1


def calibration_scale(phi0: IcnnModel, x: np.ndarray) -> float:
    """a = sqrt(E|X|^2) / sqrt(E|grad Phi0(X)|^2)."""
    g = models.icnn_input_grad(phi0, x)
    denom = float(np.sqrt(np.mean(np.sum(g * g, axis=1))))
    if not np.isfinite(denom) or denom <= 0:
        raise ValueError("degenerate calibration: potential gradients vanish")
    return float(np.sqrt(np.mean(np.sum(x * x, axis=1)))) / denom


def _icnn_phi(model: IcnnModel):
    def phi(x):
        return models.icnn_forward(model, np.atleast_2d(x)).value

    def grad_phi(x):
        return models.icnn_input_grad(model, np.atleast_2d(x))

    return phi, grad_phi


def make_icnn_benchmark(mix: MixtureSpec = MixtureSpec(), icnn: IcnnConfig = IcnnConfig(),
                        calib_samples: int = 4096, cost_samples: int = 4096,
                        phi0: IcnnModel | None = None) -> BenchmarkProblem:
    """Mixture source, calibrated convex potential Phi = a * Phi0, nu = (grad Phi)#mu."""
    if calib_samples < 1:
        raise ValueError("calib_samples must be >= 1")
    sampler = build_mixture(mix)
    if phi0 is None:
        width = icnn.width or mix.dim
        phi0 = models.init_model("icnn", [mix.dim] + [width] * icnn.depth, icnn.init_std,
                                 icnn.seed, alpha=icnn.alpha)
    calib_rng = np.random.default_rng([mix.seed, icnn.seed, 1])
    x_cal = sampler(calib_samples, calib_rng)
    a = calibration_scale(phi0, x_cal)
    phi_model = models.clone(phi0)
    phi_model.scale = a * phi0.scale
    phi, grad_phi = _icnn_phi(phi_model)

    cost_rng = np.random.default_rng([mix.seed, icnn.seed, 2])
    xc = sampler(cost_samples, cost_rng)
    c = np.sum((xc - grad_phi(xc)) ** 2, axis=1)
    gt = GroundTruth(phi, grad_phi, float(c.mean()), float(c.std(ddof=1) / np.sqrt(len(c))))
    meta = {"kind": "icnn", "mixture": asdict(mix), "icnn": asdict(icnn),
            "calib_samples": calib_samples, "calibration_scale": a,
            "log_scale_centering": "mean over coordinates within each component",
            "optimal_cost_sq": gt.optimal_cost, "optimal_cost_sq_se": gt.optimal_cost_se,
            "optimal_cost_is_estimate": True,
            "mixture_weights": sampler.weights.tolist()}
    return BenchmarkProblem("icnn", mix.dim, sampler.sample, gt, meta, phi_model=phi_model)


@dataclass
class PotentialPairs:
    x: np.ndarray
    y: np.ndarray
    phi_conj: np.ndarray       # Phi*(y)
    grad_phi_conj: np.ndarray  # grad Phi*(y) = x
    psi: np.ndarray            # psi*(y) = |y|^2/2 - Phi*(y)
    grad_psi: np.ndarray       # grad psi*(y) = y - x


def potential_records(x: np.ndarray, y: np.ndarray, phi_x: np.ndarray) -> PotentialPairs:
    """Target-side diagnostics from a pair (x, y = grad Phi(x)) and Phi(x)."""
    phi_conj = np.sum(x * y, axis=1) - phi_x
    return PotentialPairs(x, y, phi_conj, x.copy(), 0.5 * np.sum(y * y, axis=1) - phi_conj, y - x)


def target_potential_pairs(problem: BenchmarkProblem, n: int, rng) -> PotentialPairs:
    if problem.ground_truth is None:
        raise ValueError(f"{problem.name}: no ground truth")
    x, y = problem.pairs(n, rng)
    return potential_records(x, y, problem.ground_truth.phi(x))


# ---------------------------------------------------------------------------
# Construction from config dictionaries and export
# ---------------------------------------------------------------------------

def problem_from_config(cfg: dict) -> BenchmarkProblem:
    """Build a problem from a ``problem`` config section."""
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == "gaussian1d":
        return gaussian_1d()
    if kind == "gaussian2d":
        return gaussian_2d()
    if kind == "gaussian":
        return gaussian_problem(GaussianSpec(cfg["src_mean"], cfg["src_std"]),
                                GaussianSpec(cfg["dst_mean"], cfg["dst_std"]))
    if kind == "icnn":
        mix = MixtureSpec(**cfg.get("mixture", {}))
        icnn = IcnnConfig(**cfg.get("icnn", {}))
        return make_icnn_benchmark(mix, icnn, cfg.get("calib_samples", 4096))
    raise ValueError(f"unknown problem kind {kind!r}")


def write_pairs(path, x: np.ndarray, y: np.ndarray):
    d = x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k}" for k in range(d)] + [f"y{k}" for k in range(d)])
        for row in np.hstack([x, y]):
            w.writerow([repr(float(v)) for v in row])


def read_pairs(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    d = sum(1 for h in rows[0] if h.startswith("x"))
    body = np.array(rows[1:], dtype=np.float64)
    return body[:, :d], body[:, d:]


def export_benchmark(problem: BenchmarkProblem, out_dir, seed: int, n_split: int = 2048,
                     extra_meta: dict | None = None) -> Path:
    """Write meta.json, the potential's parameter file (ICNN only) and pair splits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    splits = {}
    for k, split in enumerate(("validation", "test")):
        rng = np.random.default_rng([seed, k])
        x, y = problem.pairs(n_split, rng)
        write_pairs(out / f"pairs_{split}.csv", x, y)
        splits[split] = f"pairs_{split}.csv"
    if problem.phi_model is not None:
        models.save_model(problem.phi_model, out / "phi.model")
    meta = {"problem": problem.meta, "seed": seed, "n_split": n_split, "splits": splits,
            "dim": problem.dim, "phi_file": "phi.model" if problem.phi_model is not None else None,
            **(extra_meta or {})}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    meta["generation_seconds"] = time.perf_counter() - t0
    return out
