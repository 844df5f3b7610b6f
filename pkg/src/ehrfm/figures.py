"""Report figures rendered to files with the Agg backend.

Every plotting function takes pre-digested report rows (dicts as produced by
the experiment runners) and writes a PNG; nothing here touches model state.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

MODEL_STYLE = {
    "gbm_local": dict(color="#666666", marker="s", label="GBM (site counts)"),
    "fewshot_gbm": dict(color="#666666", marker="s", label="GBM (few-shot)"),
    "fm_external": dict(color="#1f77b4", marker="o", label="FM external (frozen)"),
    "fm_continued": dict(color="#d62728", marker="D", label="FM continued"),
    "fm_local": dict(color="#2ca02c", marker="^", label="FM from scratch"),
    "fm_crosssite": dict(color="#9467bd", marker="v", label="FM cross-site"),
}


def _style(model: str) -> dict:
    s = dict(MODEL_STYLE.get(model, dict(marker="x", label=model)))
    s.setdefault("label", model)
    return s


def _f(x) -> float:
    return float(x)


def plot_overall_comparison(rows: Sequence[dict], out_path: str | Path) -> Path:
    """Bar chart of mean test AUROC per model family with bootstrap CIs."""
    means = [(r["model"], _f(r["value"]), _f(r["ci_low"]), _f(r["ci_high"]))
             for r in rows
             if r["scope"] == "mean" and r["metric"] == "auroc" and r["value"] != ""]
    if not means:
        raise ValueError("no mean auroc rows to plot")
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(len(means))
    for x, (model, v, lo, hi) in zip(xs, means):
        st = _style(model)
        ax.bar(x, v, color=st.get("color", "#333333"), width=0.6)
        ax.errorbar(x, v, yerr=[[v - lo], [hi - v]], fmt="none", ecolor="black", capsize=4)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([m for m, *_ in means], rotation=20, ha="right")
    ax.set_ylabel("mean test AUROC across tasks")
    ax.set_ylim(0.4, 1.0)
    ax.axhline(0.5, color="black", lw=0.5, ls=":")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_task_heatmap(rows: Sequence[dict], out_path: str | Path,
                      metric: str = "auroc") -> Path:
    """Model-by-task grid of test metric values."""
    cells = {}
    models, tasks = [], []
    for r in rows:
        if r["scope"] != "task" or r["metric"] != metric or r["value"] == "":
            continue
        cells[(r["model"], r["task"])] = _f(r["value"])
        if r["model"] not in models:
            models.append(r["model"])
        if r["task"] not in tasks:
            tasks.append(r["task"])
    if not cells:
        raise ValueError(f"no per-task {metric} rows to plot")
    grid = [[cells.get((m, t), float("nan")) for t in tasks] for m in models]
    fig, ax = plt.subplots(figsize=(1.1 * len(tasks) + 2, 0.6 * len(models) + 1.5))
    im = ax.imshow(grid, cmap="viridis", aspect="auto",
                   vmin=0.5 if metric == "auroc" else None)
    ax.set_xticks(range(len(tasks)))
    ax.set_xticklabels(tasks, rotation=30, ha="right")
    ax.set_yticks(range(len(models)))
    ax.set_yticklabels(models)
    for i, m in enumerate(models):
        for j, t in enumerate(tasks):
            v = cells.get((m, t))
            if v is not None:
                ax.text(j, i, f"{v:.2f}", ha="center", va="center",
                        color="white", fontsize=8)
    fig.colorbar(im, ax=ax, label=f"test {metric}")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_fewshot_curves(rows: Sequence[dict], out_path: str | Path) -> Path:
    """Mean AUROC versus labeled examples k, one line per model."""
    series = defaultdict(list)
    for r in rows:
        if r["scope"] == "k_mean" and r["metric"] == "auroc" and r["value"] != "":
            series[r["model"]].append((int(r["k"]), _f(r["value"])))
    if not series:
        raise ValueError("no k_mean rows to plot")
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for model, pts in series.items():
        pts.sort()
        st = _style(model)
        ax.plot([k for k, _ in pts], [v for _, v in pts],
                marker=st.get("marker", "o"), color=st.get("color"),
                label=st["label"])
    ax.set_xscale("log", base=2)
    ax.set_xlabel("labeled training examples per task (k)")
    ax.set_ylabel("mean test AUROC across tasks")
    ax.axhline(0.5, color="black", lw=0.5, ls=":")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_scaling_curves(rows: Sequence[dict], out_path: str | Path) -> Path:
    """Mean AUROC versus pretraining corpus fraction for each adaptation mode."""
    series = defaultdict(list)
    for r in rows:
        if r["scope"] == "mean" and r["metric"] == "auroc" and r.get("fraction"):
            series[r["mode"]].append((_f(r["fraction"]), _f(r["value"])))
    if not series:
        raise ValueError("no scaling mean rows to plot")
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    colors = {"continued": "#d62728", "from_scratch": "#2ca02c"}
    for mode, pts in sorted(series.items()):
        pts.sort()
        ax.plot([f for f, _ in pts], [v for _, v in pts], marker="o",
                color=colors.get(mode), label=mode)
    ax.set_xscale("log")
    ax.set_xlabel("fraction of local pretraining corpus")
    ax.set_ylabel("mean test AUROC across tasks")
    ax.axhline(0.5, color="black", lw=0.5, ls=":")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_report_figures(report_rows: Sequence[dict], out_dir: str | Path) -> list[Path]:
    """Render whichever figures the report rows support; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fn, name in ((plot_overall_comparison, "overall_auroc.png"),
                     (plot_task_heatmap, "task_auroc.png"),
                     (plot_fewshot_curves, "fewshot_auroc.png"),
                     (plot_scaling_curves, "scaling_auroc.png")):
        try:
            written.append(fn(report_rows, out_dir / name))
        except ValueError as exc:
            log.info("skipping %s: %s", name, exc)
    return written
