"""Figure rendering for evaluation reports (PNG, Agg backend).

Figures carry no timestamp metadata so rerunning a seeded pipeline
reproduces output files byte for byte.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .identify import CmcCurve
from .openset import DirResult
from .verify import CurvePoint, ScoreHistogramPair

_SAVE_KW = {"dpi": 120, "metadata": {"Date": None}}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_roc(curve: list[CurvePoint], path) -> None:
    far = np.array([c.far for c in curve])
    tar = np.array([c.tar for c in curve])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(far, tar, lw=1.5)
    ax.set_xscale("log")
    ax.set_xlabel("FAR")
    ax.set_ylabel("TAR")
    ax.set_title("ROC")
    ax.grid(True, which="both", alpha=0.3)
    _finish(fig, path)


def save_det(curve: list[CurvePoint], path) -> None:
    far = np.array([c.far for c in curve])
    frr = np.array([c.frr for c in curve])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(far, frr, lw=1.5)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("FAR")
    ax.set_ylabel("FRR")
    ax.set_title("DET")
    ax.grid(True, which="both", alpha=0.3)
    _finish(fig, path)


def save_score_hist(hist: ScoreHistogramPair, path, display_bins: int = 256) -> None:
    """Genuine/impostor score densities, rebinned for display."""
    factor = max(1, hist.bins // display_bins)
    n = (hist.bins // factor) * factor
    gen = hist.genuine[:n].reshape(-1, factor).sum(axis=1).astype(float)
    imp = hist.impostor[:n].reshape(-1, factor).sum(axis=1).astype(float)
    centers = np.linspace(-1, 1, gen.size, endpoint=False) + 1.0 / gen.size
    fig, ax = plt.subplots(figsize=(5, 4))
    if gen.sum():
        ax.step(centers, gen / gen.sum(), where="mid", label="genuine")
    if imp.sum():
        ax.step(centers, imp / imp.sum(), where="mid", label="impostor")
    ax.set_xlabel("cosine score")
    ax.set_ylabel("fraction")
    ax.set_title("Score distributions")
    ax.legend()
    _finish(fig, path)


def save_cmc(curve: CmcCurve, path, max_k: int | None = None) -> None:
    k = np.arange(1, curve.gallery_size + 1)
    v = curve.values
    if max_k is not None:
        k, v = k[:max_k], v[:max_k]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(k, v, lw=1.5)
    ax.set_xlabel("rank K")
    ax.set_ylabel("CMC[K]")
    ax.set_ylim(0, 1.02)
    ax.set_title("CMC")
    ax.grid(True, alpha=0.3)
    _finish(fig, path)


def save_dir_bars(results: list[DirResult], path) -> None:
    strategies = sorted({r.strategy for r in results})
    fars = sorted({r.far_target for r in results}, reverse=True)
    width = 0.8 / max(1, len(fars))
    fig, ax = plt.subplots(figsize=(5, 4))
    xs = np.arange(len(strategies))
    for fi, far in enumerate(fars):
        vals = [
            next(r.dir for r in results if r.strategy == s and r.far_target == far)
            for s in strategies
        ]
        ax.bar(xs + fi * width, vals, width, label=f"FAR={far:g}")
    ax.set_xticks(xs + width * (len(fars) - 1) / 2)
    ax.set_xticklabels(strategies)
    ax.set_ylabel("DIR")
    ax.set_ylim(0, 1.05)
    ax.set_title("Open-set DIR@FAR")
    ax.legend()
    _finish(fig, path)


def save_training_log(log, path) -> None:
    epochs = [e.epoch for e in log]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax1.plot(epochs, [e.train_loss for e in log], lw=1.5)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.grid(True, alpha=0.3)
    ax2.plot(epochs, [e.val_rank1 for e in log], lw=1.5)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val Rank@1")
    ax2.set_ylim(0, 1.02)
    ax2.grid(True, alpha=0.3)
    _finish(fig, path)
