"""Matplotlib figures rendered next to the CLI's delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# strip creation timestamps so repeated runs produce identical bytes
_PNG_META = {"metadata": {"Software": None}}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130, bbox_inches="tight", **_PNG_META)
    plt.close(fig)
    return path


def residual_vs_order(orders, residuals_by_family: dict, path) -> Path:
    """Log-scale fit residual against jet order, one line per family."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for name, res in sorted(residuals_by_family.items()):
        ax.semilogy(list(orders), res, marker="o", label=name)
    ax.set_xlabel("jet order n")
    ax.set_ylabel("residual RMS (height units)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def loss_trace(trace_rows, path, title: str = "optimization trace") -> Path:
    """Total loss per iteration, split by window."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    starts = sorted({r.window_start for r in trace_rows})
    for w in starts:
        rows = [r for r in trace_rows if r.window_start == w]
        offset = sum(1 for r in trace_rows
                     if r.window_start < w)
        xs = offset + np.arange(len(rows))
        ax.semilogy(xs, [max(r.total, 1e-16) for r in rows], lw=0.8)
    ax.set_xlabel("iteration (all windows)")
    ax.set_ylabel("total loss")
    ax.set_title(title, fontsize=10)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def fit_residual_map(uv: np.ndarray, residuals: np.ndarray, path) -> Path:
    """Scatter of per-sample height residuals over the canonical uv square."""
    fig, ax = plt.subplots(figsize=(4.4, 3.8))
    sc = ax.scatter(uv[:, 0], uv[:, 1], c=np.abs(residuals), s=8, cmap="viridis")
    fig.colorbar(sc, ax=ax, label="|height error|")
    ax.set_xlabel("u")
    ax.set_ylabel("v")
    ax.set_aspect("equal")
    return _save(fig, path)


def per_frame_metric(values_by_name: dict, path, ylabel: str = "error") -> Path:
    """Per-frame metric curves (tracking error, strain percentages, ...)."""
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    for name, vals in sorted(values_by_name.items()):
        ax.plot(np.arange(len(vals)), vals, marker=".", label=name)
    ax.set_xlabel("frame")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)
