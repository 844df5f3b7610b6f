"""Count featurization: timelines to sparse (code, lookback-window) matrices.

Three lookback intervals measured backward from the prediction time T, each
half-open (lower, upper]: an event at time t lands in window w when
T - upper(w) < t <= T - lower(w). Together they partition all of history
strictly before T, so per-code window counts always sum to the code's total
pre-prediction occurrences.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass
from datetime import timedelta
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse

from .errors import ConfigError, DataError
from .tasks import TaskCohort
from .timelines import PatientTimeline

DAY = timedelta(days=1)


@dataclass(frozen=True)
class WindowSpec:
    """Ordered lookback intervals (lower, upper] in days; upper None = unbounded."""

    bounds: tuple[tuple[float, float | None], ...] = ((0.0, 1.0), (1.0, 7.0), (7.0, None))

    def __post_init__(self):
        prev_upper = 0.0
        for lo, hi in self.bounds:
            if lo != prev_upper:
                raise ConfigError(f"windows must tile (0, inf): gap at {lo}")
            if hi is not None and hi <= lo:
                raise ConfigError(f"empty window ({lo}, {hi}]")
            prev_upper = hi if hi is not None else float("inf")
        if prev_upper != float("inf"):
            raise ConfigError("last window must be unbounded")

    def __len__(self) -> int:
        return len(self.bounds)

    def window_of(self, lookback_days: float) -> int | None:
        """Window index for an event lookback_days before the prediction time."""
        if lookback_days <= 0:
            return None
        for w, (lo, hi) in enumerate(self.bounds):
            if lookback_days > lo and (hi is None or lookback_days <= hi):
                return w
        return None


@dataclass
class SparseCountMatrix:
    """CSR count matrix over (code, window) columns with its own dictionary."""

    matrix: sparse.csr_matrix
    columns: dict[tuple[str, int], int]
    row_patient_ids: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def dict_digest(self) -> str:
        body = "\n".join(f"{code}\x1f{w}\x1f{idx}"
                         for (code, w), idx in sorted(self.columns.items(), key=lambda kv: kv[1]))
        return hashlib.sha256(body.encode()).hexdigest()


def count_featurize(cohort: TaskCohort, timelines: Mapping[str, PatientTimeline],
                    windows: WindowSpec = WindowSpec(),
                    split: str | None = None) -> SparseCountMatrix:
    """Count events per (code, window) for each cohort row (optionally one split).

    The column dictionary comes from the rows being featurized; use the
    training split's dictionary and align_columns for validation/test.
    """
    rows = cohort.rows if split is None else cohort.split_rows(split)
    columns: dict[tuple[str, int], int] = {}
    data, indices, indptr = [], [], [0]
    pids = []
    for row in rows:
        tl = timelines.get(row.patient_id)
        if tl is None:
            raise DataError(f"cohort row for unknown patient {row.patient_id!r}")
        counts: dict[int, int] = {}
        for ev in tl.events:
            if ev.time >= row.prediction_time:
                continue
            lookback = (row.prediction_time - ev.time) / DAY
            w = windows.window_of(lookback)
            if w is None:
                continue
            key = (ev.code, w)
            col = columns.get(key)
            if col is None:
                col = columns[key] = len(columns)
            counts[col] = counts.get(col, 0) + 1
        for col in sorted(counts):
            indices.append(col)
            data.append(counts[col])
        indptr.append(len(indices))
        pids.append(row.patient_id)
    mat = sparse.csr_matrix(
        (np.asarray(data, dtype=np.int64), np.asarray(indices, dtype=np.int64),
         np.asarray(indptr, dtype=np.int64)),
        shape=(len(rows), len(columns)),
    )
    return SparseCountMatrix(mat, columns, tuple(pids))


def align_columns(matrix: SparseCountMatrix,
                  reference: dict[tuple[str, int], int]) -> SparseCountMatrix:
    """Project onto a reference dictionary; columns it lacks are dropped."""
    n_rows = matrix.matrix.shape[0]
    src = matrix.matrix.tocoo()
    col_map = np.full(matrix.matrix.shape[1], -1, dtype=np.int64)
    for key, idx in matrix.columns.items():
        ref_idx = reference.get(key)
        if ref_idx is not None:
            col_map[idx] = ref_idx
    keep = col_map[src.col] >= 0
    mat = sparse.csr_matrix(
        (src.data[keep], (src.row[keep], col_map[src.col[keep]])),
        shape=(n_rows, len(reference)),
    )
    return SparseCountMatrix(mat, dict(reference), matrix.row_patient_ids)


def write_matrix(path: str | os.PathLike, matrix: SparseCountMatrix) -> None:
    """Coordinate text `row,code,window,count` plus a sidecar dictionary file."""
    inv = {idx: key for key, idx in matrix.columns.items()}
    coo = matrix.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("row", "code", "window", "count"))
        for i in order:
            code, win = inv[int(coo.col[i])]
            w.writerow((int(coo.row[i]), code, win, int(coo.data[i])))
    with open(_dict_path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("code", "window", "column"))
        for (code, win), idx in sorted(matrix.columns.items(), key=lambda kv: kv[1]):
            w.writerow((code, win, idx))


def read_matrix(path: str | os.PathLike, row_patient_ids: Sequence[str]) -> SparseCountMatrix:
    columns: dict[tuple[str, int], int] = {}
    with open(_dict_path(path), "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["code", "window", "column"]:
            raise DataError(f"{_dict_path(path)}: bad dictionary header")
        for code, win, idx in reader:
            columns[(code, int(win))] = int(idx)
    rows, cols, vals = [], [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["row", "code", "window", "count"]:
            raise DataError(f"{path}: bad matrix header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"{path} line {lineno}: expected 4 fields")
            key = (row[1], int(row[2]))
            if key not in columns:
                raise DataError(f"{path} line {lineno}: column {key} missing from dictionary")
            rows.append(int(row[0]))
            cols.append(columns[key])
            vals.append(int(row[3]))
    mat = sparse.csr_matrix((vals, (rows, cols)),
                            shape=(len(row_patient_ids), len(columns)))
    return SparseCountMatrix(mat, columns, tuple(row_patient_ids))


def _dict_path(path: str | os.PathLike) -> str:
    return str(path) + ".dict"
