"""PNG figures for CLI reports.

Imported lazily by the CLI so the solver itself never needs matplotlib.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

__all__ = ["plot_fractions", "plot_error_histogram", "plot_sweep"]


def plot_fractions(history, path):
    """σ-fraction curves per iterate with the 68/95/99.5 targets dashed."""
    h = np.asarray(history, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ks = np.arange(len(h))
    for col, (label, target) in enumerate(zip(("< 1", "< 2", "< 3"), (0.68, 0.95, 0.995))):
        line, = ax.plot(ks, 100 * h[:, col], marker="o", ms=3, label=f"|r| {label}")
        ax.axhline(100 * target, ls="--", lw=0.8, color=line.get_color())
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("residuals within band (%)")
    ax.set_ylim(0, 101)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_error_histogram(rows, path):
    """Bar chart of ``(bin_left, bin_right, count)`` rows."""
    lo = np.array([r[0] for r in rows])
    hi = np.array([r[1] for r in rows])
    cnt = np.array([r[2] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(lo, cnt, width=hi - lo, align="edge", edgecolor="k", lw=0.3)
    ax.set_xlabel("coordinate error |x - x*|")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows, path):
    """Mean wall time per K from sweep rows ``(K, rep, alg, time, ...)``."""
    ks = sorted({r[0] for r in rows})
    mean = [np.mean([r[3] for r in rows if r[0] == k]) for k in ks]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, mean, marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("K")
    ax.set_ylabel("wall time (s)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
