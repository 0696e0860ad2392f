"""SVG figures for training runs and sweeps (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp so the same data gives the same file
matplotlib.rcParams["svg.hashsalt"] = "otlab"
matplotlib.rcParams["svg.fonttype"] = "none"   # keep labels as searchable text

RUN_PANELS = [
    ("map_cos", "Map cosine similarity", False),
    ("map_l2", "Map error", True),
    ("pot_mse", "Potential error", True),
    ("pot_grad_mse", "Potential gradient error", True),
    ("flatness", "Flatness", True),
    ("dkr", "d_KR", True),
]


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def run_figure(history, path, perturbed_at=None, title: str = "") -> Path:
    """Six-panel figure of a TrainHistory; a dashed line marks a perturbation."""
    if len(history) == 0:
        raise ValueError("history is empty; nothing to plot")
    it = history.column("iteration")
    fig, axes = plt.subplots(2, 3, figsize=(12, 6.5))
    for ax, (col, label, logy) in zip(axes.ravel(), RUN_PANELS):
        vals = history.column(col)
        ax.plot(it, vals, marker="." if len(it) < 30 else None, lw=1.2)
        if logy and np.all(vals > 0):
            ax.set_yscale("log")
        if perturbed_at is not None:
            ax.axvline(perturbed_at, color="gray", ls="--", lw=0.8)
        ax.set_title(label)
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)
    return Path(path)


def sweep_heatmap(values: np.ndarray, k_values, ratio_values, path, title: str) -> Path:
    """Heatmap of per-cell means, rows = K, columns = eta_psi/eta_t."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(k_values), len(ratio_values)):
        raise ValueError(f"grid shape {values.shape} does not match axes")
    fig, ax = plt.subplots(figsize=(1.2 * len(ratio_values) + 2.5, 0.7 * len(k_values) + 2))
    finite = values[np.isfinite(values)]
    shown = np.log10(values) if finite.size and np.all(finite > 0) else values
    im = ax.imshow(shown, cmap="viridis", aspect="auto", origin="lower")
    ax.set_xticks(range(len(ratio_values)), [f"{r:g}" for r in ratio_values])
    ax.set_yticks(range(len(k_values)), [str(k) for k in k_values])
    ax.set_xlabel("eta_psi / eta_t")
    ax.set_ylabel("K")
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            ax.text(j, i, f"{values[i, j]:.3g}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="log10 mean" if shown is not values else "mean")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    return Path(path)
