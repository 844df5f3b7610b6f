"""Command-line entry point wiring ingestion, training, experiments, reports.

Subcommands operate on a site directory layout (events.csv, patients.csv,
admissions.csv as written by `synth`/`ingest`) and write artifacts plus a
manifest line recording input and output digests. Exit codes: 0 success,
2 config error, 3 data error, 4 numeric failure. EHRFM_SEED overrides any
--seed or config seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import synth
from .boost import BoostConfig, fit_gbm, predict_proba, write_gbm
from .errors import ConfigError, DataError, NumericError
from .experiments import (FewShotPlan, FMHandle, ScalingPlan, build_site_bundle,
                          corpus_for, fewshot_label_pool, pretrain_site_model,
                          run_fewshot, run_overall, run_pretrain_scaling,
                          write_report_csv, read_report_csv)
from .featurize import WindowSpec, align_columns, count_featurize, read_matrix, write_matrix
from .figures import render_report_figures
from .manifest import (append_manifest, config_get, derive_seed, dump_config,
                       load_config, manifest_line, parse_list, sha256_file,
                       verify_declared_digests)
from .metrics import auroc, ece
from .probe import default_c_grid, fit_probe, predict_risk, write_probe
from .seqmodel import (ModelConfig, continue_pretrain, encode_batch, init_params,
                       load_checkpoint, pretrain, save_checkpoint)
from .tasks import TASK_NAMES, build_all_cohorts, read_cohorts, write_cohorts
from .timelines import (assign_global_splits, ingest_events, read_admissions,
                        write_admissions, write_events, write_patients, write_splits)
from .vocab import build_vocabulary, read_vocabulary, tokenize, write_vocabulary

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.7, 0.15, 0.15)


def _resolve_seed(value: int | None, fallback: int = 0) -> int:
    env = os.environ.get("EHRFM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"EHRFM_SEED must be an integer, got {env!r}") from None
    return fallback if value is None else value


def _require_readable(*paths) -> None:
    for p in paths:
        if p is None:
            continue
        if not os.path.exists(p):
            raise ConfigError(f"input path does not exist: {p}")
        if os.path.isfile(p) and not os.access(p, os.R_OK):
            raise ConfigError(f"input path is not readable: {p}")


def _prepare_outdir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists():
        if not out.is_dir():
            raise ConfigError(f"output path exists and is not a directory: {out}")
        if any(out.iterdir()) and not force:
            raise ConfigError(f"output directory not empty (use --force): {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_config(command: str, values: dict) -> None:
    print(f"# resolved config for {command}")
    print(dump_config({k: v for k, v in values.items() if v is not None}))


def _site_paths(site_dir: str) -> dict[str, str]:
    base = Path(site_dir)
    paths = {name: str(base / f"{name}.csv")
             for name in ("events", "patients", "admissions")}
    _require_readable(*paths.values())
    return paths


def _load_site(site_dir: str):
    paths = _site_paths(site_dir)
    timelines = ingest_events(paths["events"], paths["patients"])
    admissions = read_admissions(paths["admissions"])
    return timelines, admissions, paths


def _ratios(text: str) -> tuple[float, float, float]:
    parts = parse_list(text, float)
    if len(parts) != 3:
        raise ConfigError(f"ratios must have three numbers, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _splits_for(timelines, args):
    return assign_global_splits(timelines.keys(), _ratios(args.ratios), args.split_seed)


def _digests(paths: dict[str, str]) -> dict[str, str]:
    return {name: sha256_file(p) for name, p in paths.items() if os.path.exists(p)}


def _manifest(out_dir, command: str, inputs: dict[str, str], outputs: dict[str, str],
              seed: int | None = None) -> None:
    append_manifest(out_dir, manifest_line(command, _digests(inputs), _digests(outputs), seed))


def _model_config_from(args, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, n_layers=args.layers, n_heads=args.heads,
                       d_model=args.d_model, d_ff=args.d_ff,
                       attention_window=args.window, max_seq_len=args.max_seq_len)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--max-seq-len", type=int, default=128)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr-grid", default="3e-4,1e-3")
    p.add_argument("--max-steps", type=int, default=600)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--eval-interval", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)


def _add_split_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ratios", default="0.7,0.15,0.15")
    p.add_argument("--split-seed", type=int, default=0)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    _require_readable(args.profile)
    profile = synth.load_site_profile(args.profile)
    seed = _resolve_seed(args.seed, profile.seed)
    if seed != profile.seed:
        profile = dataclasses.replace(profile, seed=seed)
    out = _prepare_outdir(args.out, args.force)
    _print_config("synth", {"profile": args.profile, "out": str(out), "seed": seed,
                            "site_id": profile.site_id, "n_patients": profile.n_patients})
    timelines, admissions, gt = synth.generate_site(profile)
    synth.write_site(out, profile, timelines, admissions, gt)
    outputs = {n: str(out / n) for n in ("events.csv", "patients.csv", "admissions.csv",
                                         "ground_truth.csv", "site_summary.json")}
    _manifest(out, "synth", {"profile": args.profile}, outputs, seed)
    print(f"wrote site {profile.site_id!r} with {len(timelines)} patients to {out}")
    return 0


def cmd_ingest(args) -> int:
    _require_readable(args.events, args.patients, args.admissions)
    out = _prepare_outdir(args.out, args.force)
    _print_config("ingest", vars(args))
    timelines = ingest_events(args.events, args.patients)
    admissions = read_admissions(args.admissions)
    for pid in admissions:
        if pid not in timelines:
            raise DataError(f"admissions reference unknown patient {pid!r}")
    write_events(out / "events.csv", timelines)
    write_patients(out / "patients.csv", timelines)
    write_admissions(out / "admissions.csv", admissions)
    outputs = {n: str(out / n) for n in ("events.csv", "patients.csv", "admissions.csv")}
    inputs = {"events": args.events, "patients": args.patients, "admissions": args.admissions}
    _manifest(out, "ingest", inputs, outputs)
    n_events = sum(len(t.events) for t in timelines.values())
    print(f"ingested {len(timelines)} patients, {n_events} events")
    return 0


def cmd_build_vocab(args) -> int:
    timelines, _, paths = _load_site(args.site)
    _print_config("build-vocab", vars(args))
    if args.split == "all":
        corpus = [timelines[p] for p in sorted(timelines)]
    else:
        splits = _splits_for(timelines, args)
        corpus = [timelines[p] for p in splits.patients(args.split)]
    vocabulary = build_vocabulary(corpus, args.k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_vocabulary(out, vocabulary)
    _manifest(out.parent, "build-vocab", paths, {"vocab": str(out)})
    print(f"wrote vocabulary of {len(vocabulary.codes)} codes (cap {args.k}) to {out}")
    return 0


def cmd_cohort(args) -> int:
    timelines, admissions, paths = _load_site(args.site)
    seed = _resolve_seed(args.seed)
    _print_config("cohort", {**vars(args), "seed": seed})
    splits = _splits_for(timelines, args)
    cohorts = build_all_cohorts(timelines, admissions, splits,
                                derive_seed(seed, "cohort"), args.min_age_days)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohorts(out, cohorts)
    write_splits(out.with_suffix(".splits.csv"), splits)
    _manifest(out.parent, "cohort", paths,
              {"cohorts": str(out), "splits": str(out.with_suffix(".splits.csv"))}, seed)
    for name in TASK_NAMES:
        c = cohorts[name]
        print(f"{name}: {len(c.rows)} rows, prevalence "
              f"{c.prevalence:.4f}" if c.prevalence is not None else f"{name}: empty")
    return 0


def cmd_featurize(args) -> int:
    timelines, _, paths = _load_site(args.site)
    _require_readable(args.cohorts)
    _print_config("featurize", vars(args))
    cohorts = read_cohorts(args.cohorts)
    if args.task not in cohorts:
        raise ConfigError(f"unknown task {args.task!r}; cohort file has {sorted(cohorts)}")
    matrix = count_featurize(cohorts[args.task], timelines, WindowSpec(), args.split or None)
    if args.align_to:
        _require_readable(args.align_to)
        ref_rows = [r.patient_id for r in cohorts[args.task].split_rows(args.align_split)]
        reference = read_matrix(args.align_to, ref_rows)
        matrix = align_columns(matrix, reference.columns)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_matrix(out, matrix)
    _manifest(out.parent, "featurize", {**paths, "cohorts": args.cohorts},
              {"matrix": str(out)})
    print(f"featurized {matrix.shape[0]} rows x {matrix.shape[1]} columns")
    return 0


def _pretrain_corpora(timelines, vocabulary, args):
    splits = _splits_for(timelines, args)
    train = [tokenize(timelines[p], vocabulary) for p in splits.patients("train")]
    valid = [tokenize(timelines[p], vocabulary) for p in splits.patients("valid")]
    return [s for s in train if s.ids], [s for s in valid if s.ids]


def cmd_pretrain(args) -> int:
    timelines, _, paths = _load_site(args.site)
    _require_readable(args.vocab)
    seed = _resolve_seed(args.seed)
    _print_config("pretrain", {**vars(args), "seed": seed})
    vocabulary = read_vocabulary(args.vocab)
    train, valid = _pretrain_corpora(timelines, vocabulary, args)
    config = _model_config_from(args, len(vocabulary.codes))
    result = pretrain(init_params(config, derive_seed(seed, "init")), train, valid,
                      config, lr_grid=tuple(parse_list(args.lr_grid, float)),
                      patience=args.patience, max_steps=args.max_steps,
                      seed=derive_seed(seed, "pretrain"), eval_interval=args.eval_interval,
                      batch_size=args.batch_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.params, config, vocabulary.digest,
                    provenance={"command": "pretrain", "seed": seed})
    _write_grid_table(out, result.grid_table)
    _manifest(out.parent, "pretrain", {**paths, "vocab": args.vocab},
              {"checkpoint": str(out)}, seed)
    best = min((c for c in result.grid_table if not c["failed"]),
               key=lambda c: c["best_valid_loss"], default=None)
    if best:
        print(f"best lr {best['lr']}: valid loss {best['best_valid_loss']:.4f} "
              f"at step {best['best_step']}")
    return 0


def cmd_continue_pretrain(args) -> int:
    timelines, _, paths = _load_site(args.site)
    _require_readable(args.checkpoint, args.vocab)
    seed = _resolve_seed(args.seed)
    _print_config("continue-pretrain", {**vars(args), "seed": seed})
    vocabulary = read_vocabulary(args.vocab)
    params, config, ckpt_digest, _ = load_checkpoint(args.checkpoint)
    train, valid = _pretrain_corpora(timelines, vocabulary, args)
    result = continue_pretrain(params, config, ckpt_digest, vocabulary.digest,
                               train, valid,
                               lr_grid=tuple(parse_list(args.lr_grid, float)),
                               patience=args.patience, max_steps=args.max_steps,
                               seed=derive_seed(seed, "pretrain"),
                               eval_interval=args.eval_interval,
                               batch_size=args.batch_size,
                               allow_vocab_mismatch=args.allow_vocab_mismatch)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.params, config, vocabulary.digest,
                    provenance={"command": "continue-pretrain", "seed": seed,
                                "base_checkpoint": sha256_file(args.checkpoint)})
    _write_grid_table(out, result.grid_table)
    _manifest(out.parent, "continue-pretrain",
              {**paths, "vocab": args.vocab, "checkpoint": args.checkpoint},
              {"checkpoint": str(out)}, seed)
    return 0


def _write_grid_table(ckpt_path: Path, grid_table) -> None:
    import csv
    with open(ckpt_path.with_suffix(ckpt_path.suffix + ".grid.csv"), "w",
              encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("lr", "best_valid_loss", "steps", "best_step", "time_to_best_s", "failed"))
        for cell in grid_table:
            w.writerow((repr(cell["lr"]),
                        "" if cell["best_valid_loss"] is None else repr(cell["best_valid_loss"]),
                        cell["steps"], cell["best_step"],
                        repr(cell["time_to_best_s"]), cell["failed"]))


def _labels_for(cohorts, task: str, split: str) -> np.ndarray:
    return np.array([r.label for r in cohorts[task].split_rows(split)], dtype=float)


def cmd_train_gbm(args) -> int:
    _require_readable(args.cohorts, args.train_features, args.valid_features)
    _print_config("train-gbm", vars(args))
    cohorts = read_cohorts(args.cohorts)
    if args.task not in cohorts:
        raise ConfigError(f"unknown task {args.task!r}")
    train_rows = [r.patient_id for r in cohorts[args.task].split_rows("train")]
    valid_rows = [r.patient_id for r in cohorts[args.task].split_rows("valid")]
    X_train = read_matrix(args.train_features, train_rows)
    X_valid = align_columns(read_matrix(args.valid_features, valid_rows), X_train.columns)
    config = BoostConfig(learning_rate=args.learning_rate, n_estimators=args.n_estimators,
                         min_samples_leaf=args.min_samples_leaf,
                         early_stopping_rounds=args.early_stopping_rounds)
    model = fit_gbm(X_train, _labels_for(cohorts, args.task, "train"),
                    X_valid, _labels_for(cohorts, args.task, "valid"), config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_gbm(out, model)
    _manifest(out.parent, "train-gbm",
              {"cohorts": args.cohorts, "train": args.train_features,
               "valid": args.valid_features},
              {"model": str(out)})
    valid_scores = predict_proba(model, X_valid)
    print(f"trained {len(model.trees)} trees; valid AUROC "
          f"{auroc(valid_scores, _labels_for(cohorts, args.task, 'valid')):.4f}")
    return 0


def cmd_train_probe(args) -> int:
    timelines, _, paths = _load_site(args.site)
    _require_readable(args.checkpoint, args.vocab, args.cohorts)
    _print_config("train-probe", vars(args))
    vocabulary = read_vocabulary(args.vocab)
    params, config, _, _ = load_checkpoint(args.checkpoint, vocabulary.digest,
                                           allow_vocab_mismatch=args.allow_vocab_mismatch)
    cohorts = read_cohorts(args.cohorts)
    if args.task not in cohorts:
        raise ConfigError(f"unknown task {args.task!r}")
    handle = FMHandle("probe-base", params, config, vocabulary)

    def reps_and_labels(split: str):
        rows = cohorts[args.task].split_rows(split)
        seqs = [tokenize(timelines[r.patient_id], vocabulary) for r in rows]
        reps, _ = encode_batch(params, seqs, [r.prediction_time for r in rows],
                               config, bos_fallback=True)
        return reps, np.array([r.label for r in rows], dtype=float)

    X_train, y_train = reps_and_labels("train")
    X_valid, y_valid = reps_and_labels("valid")
    c_grid = parse_list(args.c_grid, float) if args.c_grid else default_c_grid()
    probe, table = fit_probe(X_train, y_train, X_valid, y_valid, c_grid=c_grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_probe(out, probe)
    _manifest(out.parent, "train-probe",
              {**paths, "checkpoint": args.checkpoint, "vocab": args.vocab,
               "cohorts": args.cohorts},
              {"probe": str(out)})
    print(f"probe C={probe.C:g}, valid AUROC "
          f"{auroc(predict_risk(probe, X_valid), y_valid):.4f}")
    del handle
    return 0


# ------------------------------------------------------- experiment commands


def _experiment_setup(cfg: dict, seed: int):
    for key in ("site_a_dir", "site_b_dir"):
        if key not in cfg:
            raise ConfigError(f"run config is missing {key}")
    verify_declared_digests(cfg)
    vocab_cap = config_get(cfg, "vocab_cap", int, 500)
    min_age_days = config_get(cfg, "min_age_days", float, 28.0)
    tl_a, adm_a, _ = _load_site(cfg["site_a_dir"])
    tl_b, adm_b, _ = _load_site(cfg["site_b_dir"])
    bundle_a = build_site_bundle("site_a", tl_a, adm_a, seed, vocab_cap=vocab_cap,
                                 min_age_days=min_age_days)
    bundle_b = build_site_bundle("site_b", tl_b, adm_b, derive_seed(seed, "site_b"),
                                 vocab_cap=vocab_cap, min_age_days=min_age_days)
    return bundle_a, bundle_b


def _train_knobs(cfg: dict) -> dict:
    return {
        "lr_grid": tuple(config_get(cfg, "lr_grid", lambda s: parse_list(s, float),
                                    [3e-4, 1e-3])),
        "patience": config_get(cfg, "patience", int, 5),
        "max_steps": config_get(cfg, "max_steps", int, 600),
        "eval_interval": config_get(cfg, "eval_interval", int, 50),
        "batch_size": config_get(cfg, "batch_size", int, 32),
    }


def _model_config_values(cfg: dict) -> dict:
    return {
        "n_layers": config_get(cfg, "layers", int, 2),
        "n_heads": config_get(cfg, "heads", int, 4),
        "d_model": config_get(cfg, "d_model", int, 64),
        "d_ff": config_get(cfg, "d_ff", int, 256),
        "attention_window": config_get(cfg, "window", int, 32),
        "max_seq_len": config_get(cfg, "max_seq_len", int, 128),
    }


def _experiment_models(cfg: dict, bundle_a, bundle_b, seed: int, out: Path,
                       knobs: dict):
    """External, continued, and local models: load from config paths or train."""
    mc = _model_config_values(cfg)
    config_b = ModelConfig(vocab_size=len(bundle_b.vocab.codes), **mc)
    config_a = ModelConfig(vocab_size=len(bundle_a.vocab.codes), **mc)

    if "external_checkpoint" in cfg:
        params, config_b, _, _ = load_checkpoint(cfg["external_checkpoint"],
                                                 bundle_b.vocab.digest)
    else:
        res = pretrain_site_model(bundle_b, config_b, derive_seed(seed, "fm_external"),
                                  **knobs)
        params = res.params
        save_checkpoint(out / "fm_external.ckpt", params, config_b,
                        bundle_b.vocab.digest, provenance={"model": "fm_external"})
    external = FMHandle("fm_external", params, config_b, bundle_b.vocab)

    if "continued_checkpoint" in cfg:
        params_c, config_c, _, _ = load_checkpoint(cfg["continued_checkpoint"],
                                                   bundle_b.vocab.digest)
        continued = FMHandle("fm_continued", params_c, config_c, bundle_b.vocab)
    else:
        train = corpus_for(bundle_a, bundle_b.vocab, "train")
        valid = corpus_for(bundle_a, bundle_b.vocab, "valid")
        res = continue_pretrain({k: v.copy() for k, v in external.params.items()},
                                config_b, bundle_b.vocab.digest, bundle_b.vocab.digest,
                                train, valid, seed=derive_seed(seed, "fm_continued"),
                                **knobs)
        continued = FMHandle("fm_continued", res.params, config_b, bundle_b.vocab)
        save_checkpoint(out / "fm_continued.ckpt", res.params, config_b,
                        bundle_b.vocab.digest, provenance={"model": "fm_continued"})

    if "local_checkpoint" in cfg:
        params_l, config_a, _, _ = load_checkpoint(cfg["local_checkpoint"],
                                                   bundle_a.vocab.digest)
    else:
        res = pretrain_site_model(bundle_a, config_a, derive_seed(seed, "fm_local"),
                                  **knobs)
        params_l = res.params
        save_checkpoint(out / "fm_local.ckpt", params_l, config_a,
                        bundle_a.vocab.digest, provenance={"model": "fm_local"})
    local = FMHandle("fm_local", params_l, config_a, bundle_a.vocab)
    return {"fm_external": external, "fm_continued": continued, "fm_local": local}, config_a


def cmd_evaluate(args) -> int:
    _require_readable(args.config)
    cfg = load_config(args.config)
    seed = _resolve_seed(args.seed, config_get(cfg, "seed", int, 0))
    out = _prepare_outdir(args.out, args.force)
    _print_config("evaluate", {**cfg, "seed": seed, "out": str(out)})
    bundle_a, bundle_b = _experiment_setup(cfg, seed)
    knobs = _train_knobs(cfg)
    handles, _ = _experiment_models(cfg, bundle_a, bundle_b, seed, out, knobs)
    rows = run_overall(bundle_a, bundle_b, handles, seed=derive_seed(seed, "overall"),
                       boot_b=config_get(cfg, "bootstrap_b", int, 1000))
    write_report_csv(out / "report.csv", rows)
    _manifest(out, "evaluate", {"config": args.config},
              {"report.csv": str(out / "report.csv")}, seed)
    print(f"wrote {len(rows)} report rows to {out / 'report.csv'}")
    return 0


def cmd_fewshot(args) -> int:
    _require_readable(args.config)
    cfg = load_config(args.config)
    seed = _resolve_seed(args.seed, config_get(cfg, "seed", int, 0))
    out = _prepare_outdir(args.out, args.force)
    _print_config("fewshot", {**cfg, "seed": seed, "out": str(out)})
    bundle_a, bundle_b = _experiment_setup(cfg, seed)
    knobs = _train_knobs(cfg)
    plan = FewShotPlan(
        k_grid=tuple(config_get(cfg, "k_grid", lambda s: parse_list(s, int),
                                [8, 16, 32, 64, 128, 256, 512, 1024])),
        iterations=config_get(cfg, "iterations", int, 20),
        seed=derive_seed(seed, "fewshot"))

    if "external_checkpoint" in cfg:
        params, config_b, _, _ = load_checkpoint(cfg["external_checkpoint"],
                                                 bundle_b.vocab.digest)
    else:
        mc = _model_config_values(cfg)
        config_b = ModelConfig(vocab_size=len(bundle_b.vocab.codes), **mc)
        res = pretrain_site_model(bundle_b, config_b, derive_seed(seed, "fm_external"),
                                  **knobs)
        params = res.params
        save_checkpoint(out / "fm_external.ckpt", params, config_b,
                        bundle_b.vocab.digest, provenance={"model": "fm_external"})
    external = FMHandle("fm_external", params, config_b, bundle_b.vocab)

    # the labeled pool and the continued-pretraining corpus partition the
    # train split, so removing the task training sets from pretraining
    # still leaves the corpus with signal-bearing admissions
    pool = fewshot_label_pool(bundle_a, plan.seed,
                              config_get(cfg, "pool_fraction", float, 0.5))
    train = corpus_for(bundle_a, bundle_b.vocab, "train", exclude=pool)
    valid = corpus_for(bundle_a, bundle_b.vocab, "valid")
    res = continue_pretrain({k: v.copy() for k, v in external.params.items()},
                            config_b, bundle_b.vocab.digest, bundle_b.vocab.digest,
                            train, valid, seed=derive_seed(seed, "fm_continued"),
                            **knobs)
    continued = FMHandle("fm_continued", res.params, config_b, bundle_b.vocab)
    save_checkpoint(out / "fm_continued.ckpt", res.params, config_b,
                    bundle_b.vocab.digest,
                    provenance={"model": "fm_continued", "fewshot_pool": "excluded"})

    corpus_patients = (list(bundle_b.splits.patients("train"))
                       + [s.patient_id for s in train])
    rows = run_fewshot(bundle_a, {"fm_external": external, "fm_continued": continued},
                       plan, pretrain_corpus_patients=corpus_patients, label_pool=pool)
    write_report_csv(out / "report.csv", rows)
    _manifest(out, "fewshot", {"config": args.config},
              {"report.csv": str(out / "report.csv")}, seed)
    print(f"wrote {len(rows)} few-shot rows to {out / 'report.csv'}")
    return 0


def cmd_scaling(args) -> int:
    _require_readable(args.config)
    cfg = load_config(args.config)
    seed = _resolve_seed(args.seed, config_get(cfg, "seed", int, 0))
    out = _prepare_outdir(args.out, args.force)
    _print_config("scaling", {**cfg, "seed": seed, "out": str(out)})
    bundle_a, bundle_b = _experiment_setup(cfg, seed)
    knobs = _train_knobs(cfg)
    handles, config_a = _experiment_models(cfg, bundle_a, bundle_b, seed, out, knobs)
    plan = ScalingPlan(
        fractions=tuple(config_get(cfg, "fractions", lambda s: parse_list(s, float),
                                   [0.001, 0.01, 0.1, 0.5, 1.0])),
        modes=tuple(config_get(cfg, "modes", lambda s: parse_list(s, str),
                               ["continued", "from_scratch"])),
        seed=derive_seed(seed, "scaling"),
        min_patients=config_get(cfg, "min_patients", int, 10))
    rows, timing_rows, _ = run_pretrain_scaling(
        bundle_a, handles["fm_external"], plan, config_a,
        seed=derive_seed(seed, "scaling-train"),
        boot_b=config_get(cfg, "bootstrap_b", int, 1000), **knobs)
    write_report_csv(out / "report.csv", rows)
    write_report_csv(out / "timings.csv", timing_rows,
                     columns=("mode", "fraction", "lr", "best_valid_loss", "steps",
                              "best_step", "time_to_best_s", "wall_s", "failed"))
    _manifest(out, "scaling", {"config": args.config},
              {"report.csv": str(out / "report.csv"),
               "timings.csv": str(out / "timings.csv")}, seed)
    print(f"wrote {len(rows)} scaling rows to {out / 'report.csv'}")
    return 0


def cmd_report(args) -> int:
    report_path = Path(args.run) / "report.csv"
    _require_readable(report_path)
    _print_config("report", vars(args))
    rows = read_report_csv(report_path)
    out = Path(args.out) if args.out else Path(args.run)
    out.mkdir(parents=True, exist_ok=True)
    figures = render_report_figures(rows, out)
    summary: dict = {"n_rows": len(rows), "figures": [p.name for p in figures]}
    for scope in ("mean", "diff"):
        picked = [
            {k: r[k] for k in ("scope", "model", "task", "metric", "k", "fraction",
                               "mode", "value", "ci_low", "ci_high", "p_value",
                               "baseline") if r.get(k)}
            for r in rows if r.get("scope") == scope]
        if picked:
            summary[scope] = picked
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _manifest(out, "report", {"report.csv": str(report_path)},
              {"summary.json": str(out / "summary.json"),
               **{p.name: str(p) for p in figures}})
    print(f"wrote summary.json and {len(figures)} figures to {out}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ehrfm",
        description="Site adaptation study pipeline for event-sequence models")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic site directory")
    p.add_argument("--profile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="validate and normalize raw site CSVs")
    p.add_argument("--events", required=True)
    p.add_argument("--patients", required=True)
    p.add_argument("--admissions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("build-vocab", help="frequency vocabulary from a site")
    p.add_argument("--site", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=("train", "valid", "test", "all"))
    _add_split_args(p)
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("cohort", help="build all task cohorts with splits")
    p.add_argument("--site", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-age-days", type=float, default=28.0)
    p.add_argument("--seed", type=int)
    _add_split_args(p)
    p.set_defaults(fn=cmd_cohort)

    p = sub.add_parser("featurize", help="count features for one task cohort")
    p.add_argument("--site", required=True)
    p.add_argument("--cohorts", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--split", default="")
    p.add_argument("--align-to", help="training matrix whose columns to reuse")
    p.add_argument("--align-split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_featurize)

    p = sub.add_parser("pretrain", help="pretrain a sequence model on a site")
    p.add_argument("--site", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _add_model_args(p)
    _add_train_args(p)
    _add_split_args(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("continue-pretrain",
                       help="resume pretraining from a checkpoint on new data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--site", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--allow-vocab-mismatch", action="store_true")
    _add_train_args(p)
    _add_split_args(p)
    p.set_defaults(fn=cmd_continue_pretrain)

    p = sub.add_parser("train-gbm", help="gradient boosted trees on count features")
    p.add_argument("--cohorts", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--train-features", required=True)
    p.add_argument("--valid-features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--n-estimators", type=int, default=150)
    p.add_argument("--min-samples-leaf", type=int, default=20)
    p.add_argument("--early-stopping-rounds", type=int, default=25)
    p.set_defaults(fn=cmd_train_gbm)

    p = sub.add_parser("train-probe", help="linear probe on frozen representations")
    p.add_argument("--site", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--cohorts", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--c-grid")
    p.add_argument("--allow-vocab-mismatch", action="store_true")
    p.set_defaults(fn=cmd_train_probe)

    for name, fn, desc in (("evaluate", cmd_evaluate, "overall model comparison"),
                           ("fewshot", cmd_fewshot, "label-efficiency study"),
                           ("scaling", cmd_scaling, "pretraining data scaling study")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker cap (computation is single-process)")
        p.set_defaults(fn=fn)

    p = sub.add_parser("report", help="figures and JSON summary from a run dir")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
