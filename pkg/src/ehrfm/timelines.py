"""Patient timelines: coded events, admissions, CSV ingestion, global splits.

Times are timezone-aware UTC datetimes truncated to whole minutes. The CSV
schemas are the exchange format between every pipeline stage:

* events:     patient_id,time,code,value,unit   (value/unit may be empty)
* patients:   patient_id,birth_time
* admissions: patient_id,start,end,died         (died is 0/1)
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "valid", "test")


def parse_time(text: str) -> datetime:
    """Parse an ISO-8601 UTC timestamp, truncating anything below the minute.

    Accepts 'Z' or an explicit offset; naive timestamps are rejected because
    cross-site data with implicit local time is exactly the bug this guards
    against.
    """
    raw = text.strip()
    iso = raw[:-1] + "+00:00" if raw.endswith(("Z", "z")) else raw
    try:
        dt = datetime.fromisoformat(iso)
    except ValueError as exc:
        raise DataError(f"unparsable timestamp {text!r}") from exc
    if dt.tzinfo is None:
        raise DataError(f"timestamp {text!r} has no UTC offset")
    dt = dt.astimezone(timezone.utc)
    return dt.replace(second=0, microsecond=0)


def format_time(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%MZ")


@dataclass(frozen=True, order=True)
class ClinicalEvent:
    time: datetime
    code: str
    value: float | None = None
    unit: str | None = None


@dataclass
class PatientTimeline:
    patient_id: str
    birth_time: datetime
    events: list[ClinicalEvent] = field(default_factory=list)

    def sort(self) -> None:
        self.events.sort(key=lambda e: (e.time, e.code))

    def events_before(self, cutoff: datetime) -> list[ClinicalEvent]:
        return [e for e in self.events if e.time < cutoff]


@dataclass(frozen=True)
class Admission:
    patient_id: str
    start: datetime
    end: datetime
    died_in_hospital: bool

    def __post_init__(self):
        if self.end < self.start:
            raise DataError(
                f"admission for {self.patient_id}: end {format_time(self.end)} "
                f"precedes start {format_time(self.start)}"
            )


@dataclass
class SplitAssignment:
    """Patient-level split labels: every patient in exactly one of train/valid/test."""

    assignment: dict[str, str]

    def patients(self, split: str) -> list[str]:
        if split not in SPLIT_NAMES:
            raise ConfigError(f"unknown split {split!r}")
        return sorted(p for p, s in self.assignment.items() if s == split)

    def of(self, patient_id: str) -> str:
        return self.assignment[patient_id]


def _read_rows(path: str | os.PathLike, expected_header: Sequence[str]):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header != list(expected_header):
            raise DataError(
                f"{path}: expected header {','.join(expected_header)!r}, got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            yield lineno, row


def read_patients(path: str | os.PathLike) -> dict[str, datetime]:
    births: dict[str, datetime] = {}
    for lineno, row in _read_rows(path, ("patient_id", "birth_time")):
        if len(row) != 2:
            raise DataError(f"{path} line {lineno}: expected 2 fields, got {len(row)}")
        pid, birth = row
        if not pid:
            raise DataError(f"{path} line {lineno}: empty patient_id")
        try:
            births[pid] = parse_time(birth)
        except DataError as exc:
            raise DataError(f"{path} line {lineno}: {exc}") from None
    return births


def ingest_events(events_path: str | os.PathLike,
                  patients_path: str | os.PathLike) -> dict[str, PatientTimeline]:
    """Load events into one PatientTimeline per patient, sorted by (time, code).

    Malformed rows raise DataError naming the line. Exact duplicate rows are
    dropped and counted in a single warning. Patients with no events still get
    an (empty) timeline so downstream splits see the full roster.
    """
    births = read_patients(patients_path)
    timelines = {pid: PatientTimeline(pid, birth) for pid, birth in sorted(births.items())}
    seen: set[tuple] = set()
    n_dup = 0
    for lineno, row in _read_rows(events_path, ("patient_id", "time", "code", "value", "unit")):
        if len(row) != 5:
            raise DataError(f"{events_path} line {lineno}: expected 5 fields, got {len(row)}")
        pid, time_s, code, value_s, unit = row
        if pid not in timelines:
            raise DataError(f"{events_path} line {lineno}: unknown patient_id {pid!r}")
        if not code:
            raise DataError(f"{events_path} line {lineno}: empty code")
        try:
            when = parse_time(time_s)
        except DataError as exc:
            raise DataError(f"{events_path} line {lineno}: {exc}") from None
        if value_s:
            try:
                value = float(value_s)
            except ValueError:
                raise DataError(
                    f"{events_path} line {lineno}: non-numeric value {value_s!r}"
                ) from None
        else:
            value = None
        key = (pid, when, code, value, unit or None)
        if key in seen:
            n_dup += 1
            continue
        seen.add(key)
        timelines[pid].events.append(ClinicalEvent(when, code, value, unit or None))
    if n_dup:
        log.warning("ingest_events: dropped %d duplicate rows", n_dup)
    for tl in timelines.values():
        tl.sort()
    return timelines


def read_admissions(path: str | os.PathLike) -> dict[str, list[Admission]]:
    out: dict[str, list[Admission]] = {}
    for lineno, row in _read_rows(path, ("patient_id", "start", "end", "died")):
        if len(row) != 4:
            raise DataError(f"{path} line {lineno}: expected 4 fields, got {len(row)}")
        pid, start_s, end_s, died_s = row
        if died_s not in ("0", "1"):
            raise DataError(f"{path} line {lineno}: died must be 0 or 1, got {died_s!r}")
        try:
            adm = Admission(pid, parse_time(start_s), parse_time(end_s), died_s == "1")
        except DataError as exc:
            raise DataError(f"{path} line {lineno}: {exc}") from None
        out.setdefault(pid, []).append(adm)
    for adms in out.values():
        adms.sort(key=lambda a: (a.start, a.end))
    return out


def write_events(path: str | os.PathLike, timelines: dict[str, PatientTimeline]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("patient_id", "time", "code", "value", "unit"))
        for pid in sorted(timelines):
            for ev in timelines[pid].events:
                value = "" if ev.value is None else f"{ev.value:.6g}"
                w.writerow((pid, format_time(ev.time), ev.code, value, ev.unit or ""))


def write_patients(path: str | os.PathLike, timelines: dict[str, PatientTimeline]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("patient_id", "birth_time"))
        for pid in sorted(timelines):
            w.writerow((pid, format_time(timelines[pid].birth_time)))


def write_admissions(path: str | os.PathLike, admissions: dict[str, list[Admission]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("patient_id", "start", "end", "died"))
        for pid in sorted(admissions):
            for adm in admissions[pid]:
                w.writerow((pid, format_time(adm.start), format_time(adm.end),
                            int(adm.died_in_hospital)))


def assign_global_splits(patient_ids: Iterable[str], ratios: tuple[float, float, float],
                         seed: int) -> SplitAssignment:
    """Patient-level train/valid/test split by seeded shuffle.

    Counts are floor(n * ratio) with the remainder going to train; if that
    leaves valid or test empty while train has patients to spare, one patient
    moves over so every split is non-empty. Input order does not matter.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)!r}")
    ids = sorted(set(patient_ids))
    if not ids:
        raise DataError("no patients to split")
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_tr = int(n * ratios[0])
    n_va = int(n * ratios[1])
    n_te = int(n * ratios[2])
    n_tr += n - (n_tr + n_va + n_te)
    while n_va == 0 and n_tr > 1:
        n_tr -= 1
        n_va += 1
    while n_te == 0 and n_tr > 1:
        n_tr -= 1
        n_te += 1
    assignment = {}
    for idx, pid in enumerate(shuffled):
        if idx < n_tr:
            assignment[pid] = "train"
        elif idx < n_tr + n_va:
            assignment[pid] = "valid"
        else:
            assignment[pid] = "test"
    return SplitAssignment(assignment)


def write_splits(path: str | os.PathLike, splits: SplitAssignment) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("patient_id", "split"))
        for pid in sorted(splits.assignment):
            w.writerow((pid, splits.assignment[pid]))


def read_splits(path: str | os.PathLike) -> SplitAssignment:
    assignment = {}
    for lineno, row in _read_rows(path, ("patient_id", "split")):
        if len(row) != 2 or row[1] not in SPLIT_NAMES:
            raise DataError(f"{path} line {lineno}: bad split row {row!r}")
        assignment[row[0]] = row[1]
    return SplitAssignment(assignment)


def select_index_admission(admissions: Sequence[Admission], seed: int) -> Admission:
    """Pick one admission uniformly at random with the given seed."""
    if not admissions:
        raise DataError("select_index_admission: patient has no admissions")
    idx = int(np.random.default_rng(seed).integers(len(admissions)))
    return admissions[idx]


DAY = timedelta(days=1)
