"""Evaluation stack: AUROC, quantile-binned ECE, risk correction, hierarchical bootstrap.

AUROC uses the midrank formulation, which is algebraically identical to the
O(n^2) pairwise count with ties worth 1/2. ECE uses quantile bins that never
split tied risks. The hierarchical bootstrap resamples tasks, then patients
within each sampled task, with one derived seed per iteration so results are
reproducible and iterations could run in any order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("auroc: scores and labels must be 1-D and the same length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auroc: undefined with a single class")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def ece(risks, labels, n_bins: int = 10) -> float:
    """Expected calibration error over risk-quantile bins; tied risks share a bin."""
    risks = np.asarray(risks, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if risks.size == 0:
        raise DataError("ece: empty input")
    if risks.shape != labels.shape or risks.ndim != 1:
        raise DataError("ece: risks and labels must be 1-D and the same length")
    n = len(risks)
    order = np.argsort(risks, kind="stable")
    sorted_risks = risks[order]
    sorted_labels = labels[order]
    edges = _quantile_edges(sorted_risks, n_bins)
    if len(edges) - 1 < n_bins and n >= n_bins:
        log.warning("ece: %d bins collapsed to %d due to tied risks", n_bins, len(edges) - 1)
    total = 0.0
    for b in range(len(edges) - 1):
        lo, hi = edges[b], edges[b + 1]
        n_b = hi - lo
        if n_b == 0:
            continue
        mean_risk = sorted_risks[lo:hi].mean()
        frac_pos = sorted_labels[lo:hi].mean()
        total += (n_b / n) * abs(mean_risk - frac_pos)
    return float(total)


def _quantile_edges(sorted_risks: np.ndarray, n_bins: int) -> list[int]:
    """Bin boundaries as indices into the sorted risks, pushed past tie runs."""
    n = len(sorted_risks)
    edges = [0]
    for b in range(1, n_bins):
        cut = (b * n) // n_bins
        while 0 < cut < n and sorted_risks[cut] == sorted_risks[cut - 1]:
            cut += 1
        if cut > edges[-1] and cut < n:
            edges.append(cut)
    edges.append(n)
    return edges


def correct_risk(p, b_prime: float):
    """Undo the bias a balanced training sample puts on predicted risks.

    p' = p / (p + (1 - p) * (1 - b') / b'), where b' is the task's outcome
    rate. Strictly increasing in p, identity at b' = 0.5.
    """
    if not (0.0 < b_prime < 1.0):
        raise ConfigError(f"b_prime must lie in (0,1), got {b_prime!r}")
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DataError("correct_risk: p outside [0,1]")
    ratio = (1.0 - b_prime) / b_prime
    out = arr / (arr + (1.0 - arr) * ratio)
    return float(out) if np.isscalar(p) else out


@dataclass(frozen=True)
class BootstrapResult:
    mean_diff: float
    ci_low: float
    ci_high: float
    p_two_tailed: float
    n_iterations: int
    n_skipped: int
    seed: int


def two_tailed_p(diffs: np.ndarray) -> float:
    """min(1, 2 * smaller one-sided fraction); exact zeros count to both sides."""
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.size == 0:
        raise NumericError("no bootstrap differences recorded")
    frac_le = float(np.mean(diffs <= 0.0))
    frac_ge = float(np.mean(diffs >= 0.0))
    return min(1.0, 2.0 * min(frac_le, frac_ge))


def _metric_fn(name: str):
    if name == "auroc":
        return auroc
    if name == "ece":
        return ece
    raise ConfigError(f"unknown metric {name!r}")


def _stacked(scores) -> np.ndarray:
    """Coerce scores to shape (iterations, n); single runs become one row."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DataError("scores must be 1-D or (iterations, n)")
    return arr


def _mean_metric(fn, labels: np.ndarray, stacked: np.ndarray, idx: np.ndarray) -> float:
    return float(np.mean([fn(row[idx], labels[idx]) for row in stacked]))


def _resample_task(rng, labels: np.ndarray, need_both: bool, max_retries: int = 100):
    n = len(labels)
    for _ in range(max_retries):
        idx = rng.integers(0, n, size=n)
        if not need_both:
            return idx
        sub = labels[idx]
        if sub.any() and not sub.all():
            return idx
    return None


def _prepare_tasks(per_task: dict, metric: str):
    fn = _metric_fn(metric)
    need_both = metric == "auroc"
    prepared = []
    for name in sorted(per_task):
        labels, a, b = per_task[name]
        labels = np.asarray(labels)
        sa = _stacked(a)
        sb = _stacked(b) if b is not None else None
        if need_both and (not labels.any() or labels.all()):
            raise DataError(f"task {name!r} has a single class; auroc undefined")
        if sa.shape[1] != len(labels) or (sb is not None and sb.shape[1] != len(labels)):
            raise DataError(f"task {name!r}: scores not aligned with labels")
        prepared.append((name, labels, sa, sb))
    if not prepared:
        raise DataError("no tasks supplied")
    return fn, need_both, prepared


def hierarchical_bootstrap_diff(per_task_paired: dict, metric: str = "auroc",
                                B: int = 1000, seed: int = 0) -> BootstrapResult:
    """Two-level bootstrap of the mean-over-tasks difference (A - B).

    per_task_paired maps task name to (labels, scores_A, scores_B); scores may
    be (iterations, n) stacks, in which case the metric is averaged over
    iterations on each resample before differencing.
    """
    fn, need_both, prepared = _prepare_tasks(
        {k: v for k, v in per_task_paired.items()}, metric)
    n_tasks = len(prepared)
    children = np.random.SeedSequence(seed).spawn(B)
    diffs = []
    n_skipped = 0
    for child in children:
        rng = np.random.default_rng(child)
        task_ids = rng.integers(0, n_tasks, size=n_tasks)
        vals_a, vals_b = [], []
        ok = True
        for t in task_ids:
            _, labels, sa, sb = prepared[t]
            idx = _resample_task(rng, labels, need_both)
            if idx is None:
                ok = False
                break
            vals_a.append(_mean_metric(fn, labels, sa, idx))
            vals_b.append(_mean_metric(fn, labels, sb, idx))
        if not ok:
            n_skipped += 1
            continue
        diffs.append(float(np.mean(vals_a) - np.mean(vals_b)))
    diffs = np.asarray(diffs)
    if diffs.size == 0:
        raise NumericError("hierarchical bootstrap: every iteration was skipped")
    ci_low, ci_high = np.percentile(diffs, [2.5, 97.5])
    return BootstrapResult(
        mean_diff=float(diffs.mean()),
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        p_two_tailed=two_tailed_p(diffs),
        n_iterations=int(diffs.size),
        n_skipped=n_skipped,
        seed=seed,
    )


def hierarchical_bootstrap_mean(per_task: dict, metric: str = "auroc",
                                B: int = 1000, seed: int = 0) -> BootstrapResult:
    """Same two-level scheme for a single model's mean-over-tasks metric."""
    paired = {}
    for name, (labels, scores) in per_task.items():
        paired[name] = (labels, scores, None)
    fn, need_both, prepared = _prepare_tasks(paired, metric)
    n_tasks = len(prepared)
    children = np.random.SeedSequence(seed).spawn(B)
    stats = []
    n_skipped = 0
    for child in children:
        rng = np.random.default_rng(child)
        task_ids = rng.integers(0, n_tasks, size=n_tasks)
        vals = []
        ok = True
        for t in task_ids:
            _, labels, sa, _ = prepared[t]
            idx = _resample_task(rng, labels, need_both)
            if idx is None:
                ok = False
                break
            vals.append(_mean_metric(fn, labels, sa, idx))
        if not ok:
            n_skipped += 1
            continue
        stats.append(float(np.mean(vals)))
    stats = np.asarray(stats)
    if stats.size == 0:
        raise NumericError("hierarchical bootstrap: every iteration was skipped")
    ci_low, ci_high = np.percentile(stats, [2.5, 97.5])
    return BootstrapResult(
        mean_diff=float(stats.mean()),
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        p_two_tailed=two_tailed_p(stats),
        n_iterations=int(stats.size),
        n_skipped=n_skipped,
        seed=seed,
    )


def bootstrap_metric_ci(labels, scores, metric: str = "auroc", B: int = 1000,
                        seed: int = 0) -> tuple[float, float, float]:
    """Patient-level bootstrap CI for one task; returns (value, ci_low, ci_high)."""
    fn = _metric_fn(metric)
    need_both = metric == "auroc"
    labels = np.asarray(labels)
    stacked = _stacked(scores)
    point = _mean_metric(fn, labels, stacked, np.arange(len(labels)))
    children = np.random.SeedSequence(seed).spawn(B)
    vals = []
    for child in children:
        rng = np.random.default_rng(child)
        idx = _resample_task(rng, labels, need_both)
        if idx is None:
            continue
        vals.append(_mean_metric(fn, labels, stacked, idx))
    if not vals:
        raise NumericError("bootstrap_metric_ci: every resample lost a class")
    lo, hi = np.percentile(vals, [2.5, 97.5])
    return point, float(lo), float(hi)


def fewshot_average(values) -> tuple[float, float, np.ndarray]:
    """Mean and spread over sampling iterations; raw values kept for bootstrapping."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DataError("fewshot_average: no iteration values")
    return float(arr.mean()), float(arr.std(ddof=0)), arr
