"""Experiment orchestration: overall comparison, few-shot, pretraining scaling.

Everything downstream of the raw site files flows through a SiteBundle
(splits, cohorts, vocabulary, tokenized sequences). Model families are
compared on one evaluation site; the external model arrives from the other
site and is always used with its own vocabulary, so cross-site coding drift
shows up as OOV dropping exactly like it would with a shipped checkpoint.

Vocabularies and pretraining corpora are built from the train split only
(validation sequences are used for early-stopping loss), so test rows can
never influence a checkpoint digest.
"""

from __future__ import annotations

import hashlib
import logging
import time as _time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boost import BoostConfig, BoostedModel, fit_gbm, predict_proba, tune_gbm
from .errors import ConfigError, DataError
from .featurize import SparseCountMatrix, WindowSpec, align_columns, count_featurize
from .manifest import derive_seed, fmt_float
from .metrics import (auroc, bootstrap_metric_ci, correct_risk, ece, fewshot_average,
                      hierarchical_bootstrap_diff, hierarchical_bootstrap_mean)
from .probe import ProbeModel, fit_probe, predict_risk
from .seqmodel import ModelConfig, PretrainResult, continue_pretrain, encode_batch, init_params, pretrain
from .tasks import TASK_NAMES, TaskCohort, TaskRow, build_all_cohorts
from .timelines import Admission, PatientTimeline, SplitAssignment, assign_global_splits
from .vocab import TokenSequence, Vocabulary, build_vocabulary, tokenize

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("scope", "model", "task", "metric", "k", "iteration", "fraction",
                  "mode", "value", "ci_low", "ci_high", "p_value", "baseline", "n", "note")


@dataclass(frozen=True)
class FewShotPlan:
    k_grid: tuple[int, ...] = (2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)
    iterations: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        prev = 1
        for k in self.k_grid:
            if k <= prev or (k & (k - 1)) != 0:
                raise ConfigError("k_grid must be ascending powers of two")
            prev = k


@dataclass(frozen=True)
class ScalingPlan:
    fractions: tuple[float, ...] = (0.001, 0.01, 0.05, 0.1, 0.2, 0.4, 0.8)
    modes: tuple[str, ...] = ("continued", "from_scratch")
    seed: int = 0
    min_patients: int = 10

    def __post_init__(self):
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"fraction {f} outside (0, 1]")
        for m in self.modes:
            if m not in ("continued", "from_scratch"):
                raise ConfigError(f"unknown scaling mode {m!r}")


def sample_fewshot(rows: Sequence[TaskRow], k: int, seed: int) -> list[TaskRow]:
    """Class-balanced subsample of k rows; short positive pools are topped up
    with negatives to total k. The validation split is never subsampled."""
    if k < 2:
        raise ConfigError("k must be >= 2")
    pos = [r for r in rows if r.label == 1]
    neg = [r for r in rows if r.label == 0]
    if not pos:
        raise DataError("no positive rows to sample from")
    if k > len(rows):
        log.warning("k=%d exceeds pool of %d rows; truncating", k, len(rows))
        k = len(rows)
    rng = np.random.default_rng(seed)
    half = k // 2
    if len(pos) >= half:
        take_pos = half
    else:
        take_pos = len(pos)
    take_neg = min(k - take_pos, len(neg))
    picked = [pos[i] for i in rng.choice(len(pos), size=take_pos, replace=False)]
    picked += [neg[i] for i in rng.choice(len(neg), size=take_neg, replace=False)]
    return picked


def exclude_task_rows_from_pretraining(corpus_patients: Sequence[str],
                                       task_train_patients: set[str]) -> list[str]:
    """Patients allowed in a few-shot pretraining corpus (order preserved)."""
    return [p for p in corpus_patients if p not in task_train_patients]


@dataclass
class SiteBundle:
    site_id: str
    timelines: dict[str, PatientTimeline]
    admissions: dict[str, list[Admission]]
    splits: SplitAssignment
    cohorts: dict[str, TaskCohort]
    vocab: Vocabulary
    seed: int


def build_site_bundle(site_id: str, timelines: dict[str, PatientTimeline],
                      admissions: dict[str, list[Admission]], seed: int,
                      vocab_cap: int = 500, ratios=(0.7, 0.15, 0.15),
                      min_age_days: float = 28.0) -> SiteBundle:
    splits = assign_global_splits(timelines.keys(), ratios, derive_seed(seed, "splits", site_id))
    train_pids = splits.patients("train")
    vocab = build_vocabulary((timelines[p] for p in train_pids), vocab_cap)
    cohorts = build_all_cohorts(timelines, admissions, splits,
                                derive_seed(seed, "cohort", site_id), min_age_days)
    return SiteBundle(site_id, timelines, admissions, splits, cohorts, vocab, seed)


def corpus_for(bundle: SiteBundle, vocab: Vocabulary, split: str = "train",
               exclude: set[str] | frozenset = frozenset()) -> list[TokenSequence]:
    """Tokenized sequences for one split in sorted patient order, OOV dropped."""
    out = []
    for pid in bundle.splits.patients(split):
        if pid in exclude:
            continue
        seq = tokenize(bundle.timelines[pid], vocab)
        if seq.ids:
            out.append(seq)
    return out


@dataclass
class FMHandle:
    """A frozen sequence model plus the vocabulary its token ids refer to."""
    name: str
    params: dict[str, np.ndarray]
    config: ModelConfig
    vocab: Vocabulary
    encode_cache: dict = field(default_factory=dict)

    def representations(self, bundle: SiteBundle, rows: Sequence[TaskRow]) -> np.ndarray:
        """Anchor representations for cohort rows, cached per (patient, time)."""
        missing = [(r.patient_id, r.prediction_time) for r in rows
                   if (r.patient_id, r.prediction_time) not in self.encode_cache]
        if missing:
            seqs = [tokenize(bundle.timelines[pid], self.vocab) for pid, _ in missing]
            reps, _ = encode_batch(self.params, seqs, [pt for _, pt in missing],
                                   self.config, bos_fallback=True)
            for key, rep in zip(missing, reps):
                self.encode_cache[key] = rep
        return np.stack([self.encode_cache[(r.patient_id, r.prediction_time)] for r in rows])


def checkpoint_digest(params: Mapping[str, np.ndarray], config: ModelConfig) -> str:
    h = hashlib.sha256()
    h.update(repr(sorted(config.to_dict().items())).encode())
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def pretrain_site_model(bundle: SiteBundle, config: ModelConfig, seed: int,
                        lr_grid=(3e-4, 1e-3), patience: int = 5, max_steps: int = 600,
                        eval_interval: int = 50, batch_size: int = 32,
                        exclude: frozenset = frozenset()) -> PretrainResult:
    """From-scratch pretraining on the bundle's train split."""
    train = corpus_for(bundle, bundle.vocab, "train", exclude)
    valid = corpus_for(bundle, bundle.vocab, "valid")
    init = init_params(config, derive_seed(seed, "init", bundle.site_id))
    return pretrain(init, train, valid, config, lr_grid=lr_grid, patience=patience,
                    max_steps=max_steps, seed=derive_seed(seed, "pretrain", bundle.site_id),
                    eval_interval=eval_interval, batch_size=batch_size)


def _task_split_rows(cohort: TaskCohort) -> dict[str, list[TaskRow]]:
    return {s: cohort.split_rows(s) for s in ("train", "valid", "test")}


def _labels(rows: Sequence[TaskRow]) -> np.ndarray:
    return np.array([r.label for r in rows], dtype=float)


def probe_task_risks(handle: FMHandle, bundle: SiteBundle, task: str,
                     c_grid=None, train_rows: Sequence[TaskRow] | None = None
                     ) -> tuple[np.ndarray, ProbeModel]:
    """Fit a frozen-representation probe for one task; risks on the test split.

    Representations are z-scored per dimension with statistics taken from the
    full (unlabeled) training split, so the ridge penalty treats dimensions
    evenly regardless of how the encoder scales them; the few-shot subsample
    only supplies labels.
    """
    rows = _task_split_rows(bundle.cohorts[task])
    tr = list(train_rows) if train_rows is not None else rows["train"]
    stats = handle.representations(bundle, rows["train"])
    mu = stats.mean(axis=0)
    sd = stats.std(axis=0)
    sd[sd < 1e-12] = 1.0
    X_tr = (handle.representations(bundle, tr) - mu) / sd
    X_va = (handle.representations(bundle, rows["valid"]) - mu) / sd
    X_te = (handle.representations(bundle, rows["test"]) - mu) / sd
    probe, _ = fit_probe(X_tr, _labels(tr), X_va, _labels(rows["valid"]), c_grid=c_grid)
    return predict_risk(probe, X_te), probe


@dataclass
class GBMTaskData:
    """Count features for one task, aligned to the train split's dictionary."""
    X_train: SparseCountMatrix
    X_valid: SparseCountMatrix
    X_test: SparseCountMatrix
    rows: dict[str, list[TaskRow]]

    @staticmethod
    def build(bundle: SiteBundle, task: str, windows: WindowSpec = WindowSpec()) -> "GBMTaskData":
        cohort = bundle.cohorts[task]
        X_tr = count_featurize(cohort, bundle.timelines, windows, "train")
        X_va = align_columns(count_featurize(cohort, bundle.timelines, windows, "valid"),
                             X_tr.columns)
        X_te = align_columns(count_featurize(cohort, bundle.timelines, windows, "test"),
                             X_tr.columns)
        return GBMTaskData(X_tr, X_va, X_te, _task_split_rows(cohort))

    def subset_train(self, rows: Sequence[TaskRow]) -> SparseCountMatrix:
        index = {pid: i for i, pid in enumerate(self.X_train.row_patient_ids)}
        sel = [index[r.patient_id] for r in rows]
        return SparseCountMatrix(self.X_train.matrix[sel], self.X_train.columns,
                                 tuple(self.X_train.row_patient_ids[i] for i in sel))


def gbm_task_risks(data: GBMTaskData, config_grid: Sequence[BoostConfig],
                   train_rows: Sequence[TaskRow] | None = None
                   ) -> tuple[np.ndarray, BoostedModel]:
    X_tr = data.X_train if train_rows is None else data.subset_train(train_rows)
    y_tr = _labels(data.rows["train"] if train_rows is None else train_rows)
    y_va = _labels(data.rows["valid"])
    if len(config_grid) == 1:
        model = fit_gbm(X_tr, y_tr, data.X_valid, y_va, config_grid[0])
    else:
        model, _ = tune_gbm(config_grid, X_tr, y_tr, data.X_valid, y_va)
    return predict_proba(model, data.X_test), model


DEFAULT_GBM_GRID = (BoostConfig(learning_rate=0.1, n_estimators=150, early_stopping_rounds=25),
                    BoostConfig(learning_rate=0.3, n_estimators=150, early_stopping_rounds=25))
FEWSHOT_GBM_CONFIG = BoostConfig(learning_rate=0.1, n_estimators=100, early_stopping_rounds=20)


def _row(**kw) -> dict:
    base = {c: "" for c in REPORT_COLUMNS}
    base.update(kw)
    return base


def _metric_rows(model: str, task: str, labels: np.ndarray, risks: np.ndarray,
                 seed: int) -> list[dict]:
    out = []
    for metric in ("auroc", "ece"):
        v, lo, hi = bootstrap_metric_ci(labels, risks, metric,
                                        seed=derive_seed(seed, model, task, metric))
        out.append(_row(scope="task", model=model, task=task, metric=metric,
                        value=fmt_float(v), ci_low=fmt_float(lo), ci_high=fmt_float(hi),
                        n=len(labels)))
    return out


def run_overall(eval_bundle: SiteBundle, ext_bundle: SiteBundle,
                handles: Mapping[str, FMHandle], seed: int = 0,
                gbm_grid: Sequence[BoostConfig] = DEFAULT_GBM_GRID,
                c_grid=None, boot_b: int = 1000) -> list[dict]:
    """Five model families on the evaluation site's test splits.

    handles must provide fm_external, fm_continued and fm_local; fm_crosssite
    rows evaluate fm_local's checkpoint on the external site's cohorts.
    """
    for need in ("fm_external", "fm_continued", "fm_local"):
        if need not in handles:
            raise ConfigError(f"run_overall: missing model handle {need!r}")
    rows: list[dict] = []
    test_scores: dict[str, dict[str, np.ndarray]] = {}
    test_labels: dict[str, np.ndarray] = {}

    for task in TASK_NAMES:
        data = GBMTaskData.build(eval_bundle, task)
        y_te = _labels(data.rows["test"])
        test_labels[task] = y_te
        risks, _ = gbm_task_risks(data, gbm_grid)
        test_scores.setdefault("gbm_local", {})[task] = risks
        rows += _metric_rows("gbm_local", task, y_te, risks, seed)

    for name in ("fm_external", "fm_continued", "fm_local"):
        handle = handles[name]
        for task in TASK_NAMES:
            risks, _ = probe_task_risks(handle, eval_bundle, task, c_grid)
            test_scores.setdefault(name, {})[task] = risks
            rows += _metric_rows(name, task, test_labels[task], risks, seed)

    cross = FMHandle("fm_crosssite", handles["fm_local"].params,
                     handles["fm_local"].config, handles["fm_local"].vocab)
    for task in TASK_NAMES:
        risks, _ = probe_task_risks(cross, ext_bundle, task, c_grid)
        y = _labels(ext_bundle.cohorts[task].split_rows("test"))
        test_scores.setdefault("fm_crosssite", {})[task] = risks
        test_labels.setdefault(f"ext:{task}", y)
        rows += _metric_rows("fm_crosssite", task, y, risks, seed)

    for name in ("gbm_local", "fm_external", "fm_continued", "fm_local", "fm_crosssite"):
        lab = {t: (test_labels[t] if name != "fm_crosssite" else test_labels[f"ext:{t}"])
               for t in TASK_NAMES}
        for metric in ("auroc", "ece"):
            res = hierarchical_bootstrap_mean(
                {t: (lab[t], test_scores[name][t]) for t in TASK_NAMES},
                metric, B=boot_b, seed=derive_seed(seed, "mean", name, metric))
            rows.append(_row(scope="mean", model=name, metric=metric,
                             value=fmt_float(res.mean_diff), ci_low=fmt_float(res.ci_low),
                             ci_high=fmt_float(res.ci_high), n=len(TASK_NAMES)))

    for name in ("fm_external", "fm_continued", "fm_local"):
        for metric in ("auroc", "ece"):
            res = hierarchical_bootstrap_diff(
                {t: (test_labels[t], test_scores[name][t], test_scores["gbm_local"][t])
                 for t in TASK_NAMES},
                metric, B=boot_b, seed=derive_seed(seed, "diff", name, metric))
            rows.append(_row(scope="diff", model=name, metric=metric, baseline="gbm_local",
                             value=fmt_float(res.mean_diff), ci_low=fmt_float(res.ci_low),
                             ci_high=fmt_float(res.ci_high), p_value=fmt_float(res.p_two_tailed),
                             n=len(TASK_NAMES)))
    return rows


def fewshot_label_pool(bundle: SiteBundle, seed: int, fraction: float = 0.5
                       ) -> frozenset[str]:
    """Patients whose labels the few-shot cells may train on.

    The complement of the pool (within the train split) is what pretraining
    is allowed to see, so removing the task-specific training sets from the
    pretraining corpus still leaves it with signal-bearing inpatients. One
    seeded permutation makes the partition reproducible.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"pool fraction must be in (0,1), got {fraction}")
    pids = bundle.splits.patients("train")
    n = max(1, int(round(fraction * len(pids))))
    perm = np.random.default_rng(derive_seed(seed, "fewshot-pool")).permutation(len(pids))
    return frozenset(pids[i] for i in perm[:n])


def run_fewshot(eval_bundle: SiteBundle, handles: Mapping[str, FMHandle],
                plan: FewShotPlan, gbm_config: BoostConfig = FEWSHOT_GBM_CONFIG,
                c_grid=None, pretrain_corpus_patients: Sequence[str] | None = None,
                label_pool: frozenset[str] | None = None) -> list[dict]:
    """Probe vs GBM across the k grid with balanced sampling.

    ECE is computed after the Formula-1 correction with the full train split's
    prevalence as the deployment rate. When label_pool is given, the k-shot
    samples are drawn only from pool patients. When pretrain_corpus_patients
    is given, the leakage audit asserts it shares no patient with the task
    training pool.
    """
    if pretrain_corpus_patients is not None:
        task_train = set()
        for task in TASK_NAMES:
            task_train |= {r.patient_id for r in eval_bundle.cohorts[task].split_rows("train")}
        if label_pool is not None:
            task_train &= set(label_pool)
        overlap = set(pretrain_corpus_patients) & task_train
        if overlap:
            raise DataError(f"few-shot pretraining corpus leaks {len(overlap)} "
                            "task-training patients")
    rows: list[dict] = []
    per_model_task_k: dict[tuple, list[float]] = {}
    for task in TASK_NAMES:
        data = GBMTaskData.build(eval_bundle, task)
        y_te = _labels(data.rows["test"])
        train_rows = data.rows["train"]
        b_prime = float(_labels(train_rows).mean())
        if label_pool is not None:
            train_rows = [r for r in train_rows if r.patient_id in label_pool]
        n_pos = sum(r.label for r in train_rows)
        if n_pos == 0:
            rows.append(_row(scope="note", task=task,
                             note="skipped: no positive training rows"))
            continue
        for k in plan.k_grid:
            for it in range(plan.iterations):
                picked = sample_fewshot(train_rows, k,
                                        derive_seed(plan.seed, task, k, it))
                for name, handle in handles.items():
                    risks, _ = probe_task_risks(handle, eval_bundle, task, c_grid,
                                                train_rows=picked)
                    a = auroc(risks, y_te)
                    e = ece(correct_risk(risks, b_prime), y_te)
                    rows.append(_row(scope="cell", model=name, task=task, metric="auroc",
                                     k=k, iteration=it, value=fmt_float(a)))
                    rows.append(_row(scope="cell", model=name, task=task, metric="ece",
                                     k=k, iteration=it, value=fmt_float(e)))
                    per_model_task_k.setdefault((name, task, k), []).append(a)
                risks, _ = gbm_task_risks(data, [gbm_config], train_rows=picked)
                a = auroc(risks, y_te)
                e = ece(correct_risk(risks, b_prime), y_te)
                rows.append(_row(scope="cell", model="fewshot_gbm", task=task, metric="auroc",
                                 k=k, iteration=it, value=fmt_float(a)))
                rows.append(_row(scope="cell", model="fewshot_gbm", task=task, metric="ece",
                                 k=k, iteration=it, value=fmt_float(e)))
                per_model_task_k.setdefault(("fewshot_gbm", task, k), []).append(a)

    models = list(handles) + ["fewshot_gbm"]
    for name in models:
        for k in plan.k_grid:
            task_means = []
            for task in TASK_NAMES:
                vals = per_model_task_k.get((name, task, k))
                if not vals:
                    continue
                mean, std, _ = fewshot_average(vals)
                rows.append(_row(scope="task_mean", model=name, task=task, metric="auroc",
                                 k=k, value=fmt_float(mean), ci_low=fmt_float(mean - std),
                                 ci_high=fmt_float(mean + std), n=len(vals)))
                task_means.append(mean)
            if task_means:
                rows.append(_row(scope="k_mean", model=name, metric="auroc", k=k,
                                 value=fmt_float(float(np.mean(task_means))),
                                 n=len(task_means)))
    return rows


def run_pretrain_scaling(eval_bundle: SiteBundle, external: FMHandle, plan: ScalingPlan,
                         config: ModelConfig, seed: int = 0, lr_grid=(3e-4, 1e-3),
                         patience: int = 5, max_steps: int = 600, eval_interval: int = 50,
                         batch_size: int = 32, c_grid=None, boot_b: int = 1000
                         ) -> tuple[list[dict], list[dict], dict[tuple, str]]:
    """Continued vs from-scratch pretraining over nested corpus fractions.

    Returns (report rows, timing rows, checkpoint digests by (mode, fraction)).
    One permutation drawn per plan seed defines the nesting; the corpus fed to
    training keeps canonical patient order so fraction 1.0 from-scratch is the
    same computation as the local baseline.
    """
    train_pids = eval_bundle.splits.patients("train")
    perm = np.random.default_rng(derive_seed(plan.seed, "scaling-perm")).permutation(len(train_pids))
    valid_local = corpus_for(eval_bundle, eval_bundle.vocab, "valid")
    valid_ext = corpus_for(eval_bundle, external.vocab, "valid")
    rows: list[dict] = []
    timing_rows: list[dict] = []
    digests: dict[tuple, str] = {}
    risks_by_cell: dict[tuple, dict[str, np.ndarray]] = {}
    labels_by_task = {t: _labels(eval_bundle.cohorts[t].split_rows("test")) for t in TASK_NAMES}

    ext_risks: dict[str, np.ndarray] = {}
    for task in TASK_NAMES:
        risks, _ = probe_task_risks(external, eval_bundle, task, c_grid)
        ext_risks[task] = risks
        rows.append(_row(scope="cell", model="fm_external", task=task, metric="auroc",
                         mode="external",
                         value=fmt_float(auroc(risks, labels_by_task[task]))))
    res = hierarchical_bootstrap_mean(
        {t: (labels_by_task[t], ext_risks[t]) for t in TASK_NAMES},
        "auroc", B=boot_b, seed=derive_seed(seed, "scalemean", "external"))
    rows.append(_row(scope="mean", model="fm_external", metric="auroc", mode="external",
                     value=fmt_float(res.mean_diff), ci_low=fmt_float(res.ci_low),
                     ci_high=fmt_float(res.ci_high)))

    for frac in sorted(plan.fractions):
        n_f = int(round(frac * len(train_pids)))
        if n_f < plan.min_patients:
            rows.append(_row(scope="note", fraction=fmt_float(frac),
                             note=f"skipped: {n_f} patients below floor {plan.min_patients}"))
            continue
        subset = {train_pids[i] for i in perm[:n_f]}
        for mode in plan.modes:
            vocab = external.vocab if mode == "continued" else eval_bundle.vocab
            cell_config = external.config if mode == "continued" else config
            corpus = [tokenize(eval_bundle.timelines[p], vocab)
                      for p in train_pids if p in subset]
            corpus = [s for s in corpus if s.ids]
            t0 = _time.perf_counter()
            if mode == "continued":
                result = continue_pretrain(
                    {k: v.copy() for k, v in external.params.items()}, external.config,
                    external.vocab.digest, vocab.digest, corpus, valid_ext,
                    lr_grid=lr_grid, patience=patience, max_steps=max_steps,
                    seed=derive_seed(seed, "pretrain", eval_bundle.site_id),
                    eval_interval=eval_interval, batch_size=batch_size)
            else:
                init = init_params(config, derive_seed(seed, "init", eval_bundle.site_id))
                result = pretrain(init, corpus, valid_local, config, lr_grid=lr_grid,
                                  patience=patience, max_steps=max_steps,
                                  seed=derive_seed(seed, "pretrain", eval_bundle.site_id),
                                  eval_interval=eval_interval, batch_size=batch_size)
            wall = _time.perf_counter() - t0
            digests[(mode, frac)] = checkpoint_digest(result.params, cell_config)
            handle = FMHandle(f"{mode}@{frac}", result.params, cell_config, vocab)
            cell_risks = {}
            for task in TASK_NAMES:
                risks, _ = probe_task_risks(handle, eval_bundle, task, c_grid)
                cell_risks[task] = risks
                rows.append(_row(scope="cell", model=handle.name, task=task, metric="auroc",
                                 mode=mode, fraction=fmt_float(frac),
                                 value=fmt_float(auroc(risks, labels_by_task[task]))))
            risks_by_cell[(mode, frac)] = cell_risks
            res = hierarchical_bootstrap_mean(
                {t: (labels_by_task[t], cell_risks[t]) for t in TASK_NAMES},
                "auroc", B=boot_b, seed=derive_seed(seed, "scalemean", mode, repr(frac)))
            rows.append(_row(scope="mean", model=handle.name, metric="auroc", mode=mode,
                             fraction=fmt_float(frac), value=fmt_float(res.mean_diff),
                             ci_low=fmt_float(res.ci_low), ci_high=fmt_float(res.ci_high)))
            for cell in result.grid_table:
                timing_rows.append({"mode": mode, "fraction": fmt_float(frac),
                                    "lr": fmt_float(cell["lr"]),
                                    "best_valid_loss": "" if cell["best_valid_loss"] is None
                                    else fmt_float(cell["best_valid_loss"]),
                                    "steps": cell["steps"], "best_step": cell["best_step"],
                                    "time_to_best_s": fmt_float(cell["time_to_best_s"]),
                                    "wall_s": fmt_float(wall),
                                    "failed": cell["failed"]})

    anchor = risks_by_cell.get(("from_scratch", 1.0))
    if anchor is not None:
        for (mode, frac), cell_risks in sorted(risks_by_cell.items()):
            if (mode, frac) == ("from_scratch", 1.0):
                continue
            res = hierarchical_bootstrap_diff(
                {t: (labels_by_task[t], cell_risks[t], anchor[t]) for t in TASK_NAMES},
                "auroc", B=boot_b, seed=derive_seed(seed, "scalediff", mode, repr(frac)))
            rows.append(_row(scope="diff", model=f"{mode}@{frac}", metric="auroc",
                             mode=mode, fraction=fmt_float(frac),
                             baseline="from_scratch@1.0", value=fmt_float(res.mean_diff),
                             ci_low=fmt_float(res.ci_low), ci_high=fmt_float(res.ci_high),
                             p_value=fmt_float(res.p_two_tailed)))
    for (mode, frac), cell_risks in sorted(risks_by_cell.items()):
        res = hierarchical_bootstrap_diff(
            {t: (labels_by_task[t], cell_risks[t], ext_risks[t]) for t in TASK_NAMES},
            "auroc", B=boot_b, seed=derive_seed(seed, "extdiff", mode, repr(frac)))
        rows.append(_row(scope="diff", model=f"{mode}@{frac}", metric="auroc",
                         mode=mode, fraction=fmt_float(frac),
                         baseline="fm_external", value=fmt_float(res.mean_diff),
                         ci_low=fmt_float(res.ci_low), ci_high=fmt_float(res.ci_high),
                         p_value=fmt_float(res.p_two_tailed)))
    return rows, timing_rows, digests


def write_report_csv(path, rows: Sequence[dict], columns: Sequence[str] = REPORT_COLUMNS) -> None:
    import csv
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for row in rows:
            w.writerow({c: row.get(c, "") for c in columns})


def read_report_csv(path) -> list[dict]:
    import csv
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
