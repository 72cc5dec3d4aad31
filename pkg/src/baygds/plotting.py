"""Static figures for campaign reports (Agg backend, reproducible SVG/PNG output)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "baygds"


def _save(fig, path) -> Path:
    path = Path(path)
    meta = {"Date": None} if path.suffix == ".svg" else {}
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)
    return path


def _float(v) -> float:
    return float(v) if v not in ("", None) else np.nan


def learning_curve(history: Sequence[dict], path, baseline: Sequence[dict] | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    t = [int(r["t"]) for r in history]
    ax.plot(t, [_float(r["mae"]) for r in history], label="uncertainty acquisition")
    if baseline:
        ax.plot([int(r["t"]) for r in baseline], [_float(r["mae"]) for r in baseline], "--", label="random acquisition")
    ax.set_xlabel("acquisition iteration t")
    ax.set_ylabel("hold-out MAE (standardized)")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def hit_rate_curves(summary: Sequence[dict], e_max: int, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    combos = list(dict.fromkeys(r["combination"] for r in summary))
    budgets = np.arange(1, e_max + 1)
    for combo in combos:
        rows = [r for r in summary if r["combination"] == combo]
        e = np.array([int(r["e_eta"]) if r["e_eta"] not in ("", None) else e_max + 1 for r in rows])
        ax.step(budgets, [100.0 * np.mean(e <= b) for b in budgets], where="post", label=combo)
    ax.set_xlabel("oracle evaluation budget")
    ax.set_ylabel("hit rate [%]")
    ax.set_ylim(0, 102)
    ax.legend(frameon=False, fontsize=7)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def e_eta_histogram(hist: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    combos = list(dict.fromkeys(r["combination"] for r in hist))
    width = 0.8 / max(len(combos), 1)
    for k, combo in enumerate(combos):
        rows = [r for r in hist if r["combination"] == combo]
        e = np.array([int(r["e"]) for r in rows])
        ax.bar(e + (k - len(combos) / 2) * width, [int(r["count"]) for r in rows], width, label=combo)
    ax.set_xlabel("evaluations to meet the threshold")
    ax.set_ylabel("targets")
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)


def parity_plot(parity: Sequence[dict], path) -> Path:
    comps = ["P11", "P22", "P12"]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))
    for ax, c in zip(axes, comps):
        rows = [r for r in parity if r["component"] == c]
        if rows:
            t = np.array([_float(r["target_mean_abs"]) for r in rows])
            a = np.array([_float(r["achieved_mean_abs"]) for r in rows])
            met = np.array([str(r["met"]) == "1" for r in rows])
            ax.scatter(t[met], a[met], s=8, label="threshold met")
            ax.scatter(t[~met], a[~met], s=8, marker="x", label="budget-limited")
            lim = [0, max(t.max(), a.max()) * 1.05]
            ax.plot(lim, lim, "k-", lw=0.8)
            ax.set_xlim(lim)
            ax.set_ylim(lim)
        ax.set_title(c)
        ax.set_xlabel("target mean |P| [MPa]")
    axes[0].set_ylabel("achieved mean |P| [MPa]")
    axes[0].legend(frameon=False, fontsize=7)
    return _save(fig, path)


def nmae_histogram(hist: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    combos = list(dict.fromkeys(r["combination"] for r in hist))
    for combo in combos:
        rows = [r for r in hist if r["combination"] == combo]
        ax.plot(range(len(rows)), [int(r["count"]) for r in rows], marker="o", label=combo)
        labels = [f">{100 * _float(r['lo']):.0f}%" for r in rows]
    if combos:
        ax.set_xticks(range(len(labels)), labels, rotation=45, fontsize=7)
    ax.set_xlabel("aggregated nMAE of budget-limited selections")
    ax.set_ylabel("targets")
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)
