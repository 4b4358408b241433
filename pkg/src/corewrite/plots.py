"""Figures written next to the CSV reports of a run, a sweep or an evaluation."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CURVE_METRICS = ("bleu2", "rougeL", "em")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_csv(rows: Sequence[dict], path, fieldnames=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def iteration_rows(warmup: dict, reports) -> list[dict]:
    """One row per iteration (0 = warm-up) with pool sizes and held-out scores."""
    rows = []
    split = "test" if warmup.get("test") else "dev"
    if warmup.get(split):
        rows.append({"iteration": 0, "p_s": 0, "p_r": 0, "u_s": "", "u_r": "",
                     **{m: warmup[split][m] for m in CURVE_METRICS}})
    for r in reports:
        scores = (r.test if split == "test" else r.dev) or {}
        rows.append({"iteration": r.iteration, "p_s": r.p_s, "p_r": r.p_r, "u_s": r.u_s, "u_r": r.u_r,
                     **{m: scores.get(m, "") for m in CURVE_METRICS}})
    return rows


def plot_iterations(rows: Sequence[dict], path, title: str = "co-training"):
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    its = [r["iteration"] for r in rows]
    for m in CURVE_METRICS:
        ys = [r[m] for r in rows]
        if all(y != "" for y in ys):
            ax.plot(its, ys, marker="o", label=m)
    ax.set_xlabel("iteration (0 = warm-up)")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.02)
    ax.set_xticks(its)
    ax.legend(frameon=False)
    ax.set_title(title)
    pool_rows = [r for r in rows if r["u_s"] != ""]
    if pool_rows:
        x = [r["iteration"] for r in pool_rows]
        ax2.plot(x, [r["u_s"] for r in pool_rows], marker="s", label="|U_S|")
        ax2.plot(x, [r["u_r"] for r in pool_rows], marker="^", label="|U_R|")
        ax2.bar([i - 0.15 for i in x], [r["p_s"] for r in pool_rows], width=0.3, alpha=0.4, label="kept P_S")
        ax2.bar([i + 0.15 for i in x], [r["p_r"] for r in pool_rows], width=0.3, alpha=0.4, label="kept P_R")
        ax2.set_xticks(x)
        ax2.legend(frameon=False, fontsize=8)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("examples")
    return _save(fig, path)


def plot_sweep(rows: Sequence[dict], keys: Sequence[str], path, metric: str = "em"):
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows) + 2), 3.4))
    labels = ["\n".join(f"{k}={r[k]}" for k in keys) for r in rows]
    vals = [r.get(metric) or 0.0 for r in rows]
    ax.bar(range(len(rows)), vals, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel(f"final {metric}")
    ax.set_ylim(0, 1.02)
    return _save(fig, path)


def plot_metrics(scores: dict, path, title: str = ""):
    fig, ax = plt.subplots(figsize=(5, 3))
    names = list(scores)
    ax.bar(names, [scores[n] for n in names], color="tab:gray")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    for i, n in enumerate(names):
        ax.text(i, scores[n] + 0.01, f"{scores[n]:.3f}", ha="center", fontsize=7)
    return _save(fig, path)
