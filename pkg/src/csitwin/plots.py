"""Matplotlib figures for the experiment report (written to PNG files)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_direct_generalization(rows, path) -> Path:
    """Target-test NMSE vs training-set size, one line per training source."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for src in ("target", "twin", "baseline"):
        cells = sorted((r["train_size"], r["nmse_db"]) for r in rows if r["train_source"] == src)
        if cells:
            x, y = zip(*cells)
            ax.plot(x, y, marker="o", label=f"trained on {src}")
    ax.set_xscale("log")
    ax.set_xlabel("training samples")
    ax.set_ylabel("target-test NMSE (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_refinement(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    policies = []
    for r in rows:
        if r["policy"] not in policies:
            policies.append(r["policy"])
    for pol in policies:
        cells = sorted((r["refine_size"], r["nmse_db"]) for r in rows if r["policy"] == pol)
        x, y = zip(*cells)
        ax.plot(x, y, marker="o", linestyle="--" if pol == "none" else "-", label=pol)
    ax.set_xlabel("refinement samples")
    ax.set_ylabel("target-test NMSE (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_correlation_cdf(grid, cdfs: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, cdf in cdfs.items():
        ax.step(grid, cdf, where="post", label=label)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("max normalised correlation to twin data")
    ax.set_ylabel("empirical CDF")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper left")
    return _save(fig, path)


def mean_by(rows, keys, value="nmse_db"):
    """Average ``value`` over replicates, grouping by ``keys``."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    return [dict(zip(keys, k), **{value: float(np.mean(v))}) for k, v in groups.items()]
