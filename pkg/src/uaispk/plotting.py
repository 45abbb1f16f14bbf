"""Figures: DET curves on normal-deviate axes and probe accuracy matrices."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import norm  # noqa: E402

from .backend import DetCurve  # noqa: E402

DET_TICKS = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4)
# PNG metadata would otherwise embed the matplotlib version string
_PNG_META = {"Software": None}


def _probit(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return norm.ppf(np.clip(p, lo, hi))


def plot_det(curves: dict[str, DetCurve], path, title: str | None = None,
             limits: tuple[float, float] = (0.001, 0.5)) -> Path:
    """Write a DET plot (miss vs false alarm, probit-warped) to ``path``."""
    lo, hi = limits
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    for name, c in curves.items():
        x = _probit(c.fpr, lo, hi)
        y = _probit(c.fnr, lo, hi)
        ax.plot(x, y, lw=1.5, label=f"{name} (EER {100 * c.eer:.2f}%)")
        e = _probit(np.array([c.eer]), lo, hi)
        ax.plot(e, e, "o", ms=4, color=ax.lines[-1].get_color())
    ticks = [t for t in DET_TICKS if lo <= t <= hi]
    pos = norm.ppf(ticks)
    labels = [f"{100 * t:g}" for t in ticks]
    ax.set_xticks(pos, labels)
    ax.set_yticks(pos, labels)
    ax.set_xlim(norm.ppf(lo), norm.ppf(hi))
    ax.set_ylim(norm.ppf(lo), norm.ppf(hi))
    ax.plot([norm.ppf(lo), norm.ppf(hi)], [norm.ppf(lo), norm.ppf(hi)], ":", color="0.6", lw=0.8)
    ax.set_xlabel("False positive rate (%)")
    ax.set_ylabel("False negative rate (%)")
    ax.grid(True, color="0.85", lw=0.6)
    if title:
        ax.set_title(title)
    if curves:
        ax.legend(loc="upper right", fontsize=8, frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_probe_matrix(matrix: np.ndarray, rows: list[str], cols: list[str], path,
                      title: str | None = None) -> Path:
    """Heatmap of probe accuracies (rows: embeddings, columns: factors); NaN cells stay blank."""
    matrix = np.asarray(matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(cols), 0.9 + 0.55 * len(rows)))
    im = ax.imshow(np.ma.masked_invalid(matrix), vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    for i in range(len(rows)):
        for j in range(len(cols)):
            v = matrix[i, j]
            if np.isfinite(v):
                ax.text(j, i, f"{100 * v:.1f}", ha="center", va="center",
                        color="white" if v < 0.6 else "black", fontsize=9)
    ax.set_xticks(range(len(cols)), cols)
    ax.set_yticks(range(len(rows)), rows)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="accuracy")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_training_log(train_log, path) -> Path:
    """Per-epoch main-branch losses and held-out speaker accuracy."""
    epochs = train_log.column("epoch")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in ("pred", "recon", "adv"):
        ax1.plot(epochs, train_log.column(name), label=name)
    ax1.set_yscale("log")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False, fontsize=8)
    ax2.plot(epochs, train_log.column("heldout_speaker_acc"), color="k")
    ax2.set_ylim(0, 1.02)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("held-out speaker accuracy")
    for ax in (ax1, ax2):
        ax.grid(True, color="0.85", lw=0.6)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path
