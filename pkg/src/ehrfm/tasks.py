"""The eight inpatient prediction tasks: prediction times, exclusions, labels, cohorts.

Anchoring follows the end-of-day rule: the prediction time is the midnight
that ENDS the anchor day (admission day for most tasks, discharge day for
30-day readmission), so the model always has the anchor day's events available
and the exclusion windows are non-degenerate.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, time, timedelta, timezone
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, DataError
from .manifest import derive_seed
from .timelines import (
    Admission,
    PatientTimeline,
    SplitAssignment,
    format_time,
    parse_time,
    select_index_admission,
)

log = logging.getLogger(__name__)

DAY = timedelta(days=1)

TASK_NAMES = (
    "mortality",
    "long_los",
    "readmission_30d",
    "hypoglycemia",
    "hyponatremia",
    "hyperkalemia",
    "anemia",
    "thrombocytopenia",
)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # "operational" or "lab"
    lab_codes: frozenset[str] = frozenset()
    threshold: float | None = None
    unit: str | None = None
    direction: str | None = None  # "below" or "above"
    prediction_time_rule: str = "end_of_admission_day"
    window_rule: str = "until_discharge"

    def __post_init__(self):
        if self.kind == "lab":
            if not self.lab_codes or self.threshold is None or self.direction not in ("below", "above"):
                raise ConfigError(f"lab task {self.name!r} needs lab_codes, threshold, direction")
        elif self.kind == "operational":
            if self.lab_codes or self.threshold is not None:
                raise ConfigError(f"operational task {self.name!r} must not carry lab fields")
        else:
            raise ConfigError(f"unknown task kind {self.kind!r}")

    def with_lab_codes(self, codes: Iterable[str]) -> "TaskSpec":
        return replace(self, lab_codes=frozenset(codes))


def default_task_specs() -> dict[str, TaskSpec]:
    """The eight tasks with their thresholds (strict comparisons, as printed)."""
    specs = [
        TaskSpec("mortality", "operational"),
        TaskSpec("long_los", "operational"),
        TaskSpec("readmission_30d", "operational",
                 prediction_time_rule="end_of_discharge_day",
                 window_rule="thirty_days_post_discharge"),
        TaskSpec("hypoglycemia", "lab", frozenset({"LAB/GLU"}), 3.0, "mmol/L", "below"),
        TaskSpec("hyponatremia", "lab", frozenset({"LAB/NA"}), 125.0, "mmol/L", "below"),
        TaskSpec("hyperkalemia", "lab", frozenset({"LAB/K"}), 7.0, "mmol/L", "above"),
        TaskSpec("anemia", "lab", frozenset({"LAB/HGB"}), 70.0, "g/L", "below"),
        TaskSpec("thrombocytopenia", "lab", frozenset({"LAB/PLT"}), 50.0, "1e9/L", "below"),
    ]
    return {s.name: s for s in specs}


@dataclass(frozen=True)
class TaskRow:
    patient_id: str
    prediction_time: datetime
    label: int
    split: str


@dataclass
class TaskCohort:
    task: TaskSpec
    rows: list[TaskRow]
    prevalence: float | None
    n_ignored_lab_events: int = 0

    def split_rows(self, split: str) -> list[TaskRow]:
        return [r for r in self.rows if r.split == split]


def prediction_time(admission: Admission, spec: TaskSpec) -> datetime:
    """Midnight (00:00 UTC) of the day after the anchor day."""
    anchor = admission.start if spec.prediction_time_rule == "end_of_admission_day" else admission.end
    day_start = datetime.combine(anchor.date(), time(0, 0), tzinfo=timezone.utc)
    return day_start + DAY


def _crosses(value: float, spec: TaskSpec) -> bool:
    return value < spec.threshold if spec.direction == "below" else value > spec.threshold


def _qualifying_lab_in(timeline: PatientTimeline, spec: TaskSpec, lo: datetime, hi: datetime,
                       include_hi: bool, counters: dict) -> bool:
    """Any lab event of the task's codes in [lo, hi) or [lo, hi] crossing the threshold."""
    hit = False
    for ev in timeline.events:
        if ev.code not in spec.lab_codes:
            continue
        if ev.time < lo or ev.time > hi or (not include_hi and ev.time == hi):
            continue
        if ev.value is None:
            counters["missing_value"] += 1
            continue
        if ev.unit is not None and spec.unit is not None and ev.unit != spec.unit:
            counters["unit_mismatch"] += 1
            continue
        if _crosses(ev.value, spec):
            hit = True
    return hit


def label(timeline: PatientTimeline, admission: Admission,
          next_admissions: Sequence[Admission], spec: TaskSpec,
          counters: dict | None = None) -> int:
    """Label the (non-excluded) admission for one task."""
    counters = counters if counters is not None else {"missing_value": 0, "unit_mismatch": 0}
    if spec.name == "mortality":
        return int(admission.died_in_hospital)
    if spec.name == "long_los":
        return int(admission.end - admission.start >= 7 * DAY)
    if spec.window_rule == "thirty_days_post_discharge":
        lo = admission.end
        hi = admission.end + 30 * DAY
        return int(any(lo < a.start <= hi for a in next_admissions))
    pt = prediction_time(admission, spec)
    return int(_qualifying_lab_in(timeline, spec, pt, admission.end, True, counters))


def apply_exclusions(candidates: Sequence[tuple[PatientTimeline, Admission]], spec: TaskSpec,
                     all_admissions: Mapping[str, Sequence[Admission]],
                     min_age_days: float = 0.0) -> list[tuple[PatientTimeline, Admission]]:
    """Drop candidates the task must not score.

    For until-discharge tasks that means discharge or death at or before the
    prediction time, plus (for lab tasks) an outcome event between admission
    and prediction time. Readmission keeps discharged patients by
    construction, so there it means in-hospital death or a readmission that
    already happened before the prediction time. The site age floor applies
    everywhere.
    """
    kept = []
    counters = {"missing_value": 0, "unit_mismatch": 0}
    for tl, adm in candidates:
        pt = prediction_time(adm, spec)
        age = adm.start - tl.birth_time
        if age < timedelta(days=min_age_days):
            continue
        if spec.window_rule == "until_discharge":
            if adm.end <= pt:
                continue
            if spec.kind == "lab" and _qualifying_lab_in(tl, spec, adm.start, pt, False, counters):
                continue
        else:
            if adm.died_in_hospital:
                continue
            later = [a for a in all_admissions.get(adm.patient_id, ()) if a.start > adm.end]
            if any(adm.end < a.start < pt for a in later):
                continue
        kept.append((tl, adm))
    return kept


def build_task_cohort(timelines: Mapping[str, PatientTimeline],
                      admissions: Mapping[str, Sequence[Admission]],
                      splits: SplitAssignment, spec: TaskSpec, seed: int,
                      min_age_days: float = 0.0) -> TaskCohort:
    """One row per retained patient with an index admission chosen uniformly.

    The per-patient selection stream depends only on (seed, patient_id), so
    all tasks built with the same seed share index admissions and a patient is
    encoded once per prediction time rule rather than once per task.
    """
    candidates = []
    for pid in sorted(admissions):
        if pid not in timelines:
            raise DataError(f"admission for unknown patient {pid!r}")
        adms = admissions[pid]
        if not adms:
            continue
        index = select_index_admission(adms, derive_seed(seed, "index", pid))
        candidates.append((timelines[pid], index))
    kept = apply_exclusions(candidates, spec, admissions, min_age_days)
    counters = {"missing_value": 0, "unit_mismatch": 0}
    rows = []
    for tl, adm in kept:
        later = [a for a in admissions[tl.patient_id] if a.start > adm.end]
        y = label(tl, adm, later, spec, counters)
        rows.append(TaskRow(tl.patient_id, prediction_time(adm, spec), y, splits.of(tl.patient_id)))
    rows.sort(key=lambda r: r.patient_id)
    prevalence = (sum(r.label for r in rows) / len(rows)) if rows else None
    if prevalence is None:
        log.warning("task %s: empty cohort, prevalence undefined", spec.name)
    else:
        for split_name in ("train", "valid", "test"):
            split = [r for r in rows if r.split == split_name]
            if split and not any(r.label for r in split):
                log.warning("task %s: zero positives in %s split", spec.name, split_name)
    n_ignored = counters["missing_value"] + counters["unit_mismatch"]
    if n_ignored:
        log.info("task %s: ignored %d lab events (missing value or unit mismatch)",
                 spec.name, n_ignored)
    return TaskCohort(spec, rows, prevalence, n_ignored)


def build_all_cohorts(timelines, admissions, splits, seed: int, min_age_days: float = 0.0,
                      specs: Mapping[str, TaskSpec] | None = None) -> dict[str, TaskCohort]:
    specs = specs or default_task_specs()
    return {name: build_task_cohort(timelines, admissions, splits, spec, seed, min_age_days)
            for name, spec in specs.items()}


def write_cohorts(path: str | os.PathLike, cohorts: Mapping[str, TaskCohort]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("patient_id", "task", "prediction_time", "label", "split"))
        for name in sorted(cohorts):
            for row in cohorts[name].rows:
                w.writerow((row.patient_id, name, format_time(row.prediction_time),
                            row.label, row.split))


def read_cohorts(path: str | os.PathLike,
                 specs: Mapping[str, TaskSpec] | None = None) -> dict[str, TaskCohort]:
    specs = specs or default_task_specs()
    rows_by_task: dict[str, list[TaskRow]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["patient_id", "task", "prediction_time", "label", "split"]:
            raise DataError(f"{path}: unexpected cohort header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5 or row[1] not in specs or row[3] not in ("0", "1"):
                raise DataError(f"{path} line {lineno}: bad cohort row {row!r}")
            rows_by_task.setdefault(row[1], []).append(
                TaskRow(row[0], parse_time(row[2]), int(row[3]), row[4]))
    out = {}
    for name, rows in rows_by_task.items():
        prevalence = sum(r.label for r in rows) / len(rows) if rows else None
        out[name] = TaskCohort(specs[name], rows, prevalence)
    return out
