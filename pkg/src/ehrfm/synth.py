"""Two-site synthetic EHR generator with planted, quantifiable signal.

Every label is drawn from a logistic model over a handful of planted motif
codes that occur shortly before the task's prediction time, so the Bayes
AUROC of each task is computable from the latent risks and every pipeline
claim (calibration, leakage, transfer) can be checked against ground truth.

Patient streams are independently seeded, so generation could run in
parallel; outputs are written in patient-id order either way.

Intercepts are calibrated against the realized label uniforms: with patients
sorted by logit(u) - score, placing the intercept between the m-th and
(m+1)-th order statistic realizes exactly m positives, which keeps tiny
prevalence targets on target without relying on binomial luck.

Two bookkeeping quirks worth knowing:
- Readmission-positive patients receive a deliberately short follow-up visit.
  When the downstream uniform index-admission pick lands on it, the row drops
  out of the discharge-window cohorts and scores 0 for readmission, so twice
  the target count of readmission positives is planted to land the expected
  downstream prevalence on target.
- Ground truth stores intended labels; for readmission the realized cohort
  label can differ (the coin above), so bayes_auroc is an upper bound there.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataError
from .manifest import derive_seed
from .metrics import auroc
from .tasks import TASK_NAMES, default_task_specs, prediction_time
from .timelines import Admission, ClinicalEvent, PatientTimeline, format_time

log = logging.getLogger(__name__)

DAY = timedelta(days=1)

# Background code pools. Motif and task-lab codes live outside these ranges so
# a code's presence is exactly as informative as the generative law says.
N_DX, N_MED, N_PROC, N_BGLAB = 240, 140, 100, 40
TASK_LAB_RANGES = {
    "LAB/GLU": ((3.9, 9.5), (1.8, 2.7)),      # (safe range, qualifying range)
    "LAB/NA": ((130.0, 147.0), (118.0, 123.5)),
    "LAB/K": ((3.3, 5.9), (7.3, 8.4)),
    "LAB/HGB": ((85.0, 165.0), (48.0, 66.0)),
    "LAB/PLT": ((120.0, 420.0), (18.0, 45.0)),
}

PREVALENCE_SITE_A = {
    "mortality": 0.006, "long_los": 0.161, "readmission_30d": 0.060,
    "hypoglycemia": 0.012, "hyponatremia": 0.002, "hyperkalemia": 0.009,
    "thrombocytopenia": 0.019, "anemia": 0.029,
}
PREVALENCE_SITE_B = {
    "mortality": 0.036, "long_los": 0.277, "readmission_30d": 0.006,
    "hypoglycemia": 0.016, "hyponatremia": 0.009, "hyperkalemia": 0.009,
    "thrombocytopenia": 0.031, "anemia": 0.068,
}
# Desk-scale targets keep every task's test split populated at n=5k so AUROC
# estimates are stable; the relative site skew stays in the 1.3-2x range.
PREVALENCE_DESK_A = {
    "mortality": 0.10, "long_los": 0.22, "readmission_30d": 0.12,
    "hypoglycemia": 0.15, "hyponatremia": 0.10, "hyperkalemia": 0.12,
    "thrombocytopenia": 0.14, "anemia": 0.18,
}
PREVALENCE_DESK_B = {
    "mortality": 0.16, "long_los": 0.30, "readmission_30d": 0.08,
    "hypoglycemia": 0.20, "hyponatremia": 0.14, "hyperkalemia": 0.12,
    "thrombocytopenia": 0.20, "anemia": 0.24,
}
PREVALENCE_PRESETS = {
    "site_a": PREVALENCE_SITE_A, "site_b": PREVALENCE_SITE_B,
    "desk_a": PREVALENCE_DESK_A, "desk_b": PREVALENCE_DESK_B,
}


def motif_codes_for(task_index: int) -> tuple[str, ...]:
    """Twelve dedicated codes per task (4 DX, 4 MED, 4 PROC), outside the
    background pools.

    A planted burst draws a small random subset of the panel, so no single
    code is a reliable indicator on its own; learners that treat codes as
    independent count features need many labels to aggregate the panel,
    while a sequence model can compress the co-occurring members into one
    direction of its representation space.
    """
    base = 900 + 10 * task_index
    return tuple(f"{kind}/{base + j}" for kind in ("DX", "MED", "PROC")
                 for j in range(4))


MOTIF_CODES = {name: motif_codes_for(i) for i, name in enumerate(TASK_NAMES)}
PANEL_SIZE = 12
# A signal unit is 3-5 distinct panel members. Fired slots plant them as a
# chain (members 1-3 minutes apart, anchored late in the pre-prediction
# span); every admission additionally scatters DECOY_RATE units per panel
# at isolated times. Window counts therefore observe fires plus Poisson
# noise, while chain adjacency remains an exact signature of a fire: any
# two distinct same-panel events 5+ minutes apart get a background event
# wedged between them, so only chains are ever adjacent in token order.
BURST_CODES = (3, 5)
BURST_WINDOW = (0.70, 0.97)
DECOY_RATE = 1.0
FILLER_GAP = 5.0


def code_universe() -> list[str]:
    codes = [f"DX/{i:03d}" for i in range(N_DX)]
    codes += [f"MED/{i:03d}" for i in range(N_MED)]
    codes += [f"PROC/{i:03d}" for i in range(N_PROC)]
    codes += [f"LAB/B{i:02d}" for i in range(N_BGLAB)]
    codes += sorted(TASK_LAB_RANGES)
    for panel in MOTIF_CODES.values():
        codes += list(panel)
    return codes


def build_default_dialect() -> dict[str, str]:
    """Site-B rename map covering about half the code universe.

    Background codes with an even numeric suffix are renamed by bumping the
    suffix by 500 (never colliding with a real code). Task lab codes are left
    alone, as are the DX and MED members of each task panel; the PROC members
    are renamed, so a model carried across sites loses one third of each
    planted signal to OOV dropping until it is retrained on local data.
    """
    ren: dict[str, str] = {}
    for prefix, n in (("DX", N_DX), ("MED", N_MED), ("PROC", N_PROC)):
        for i in range(0, n, 2):
            ren[f"{prefix}/{i:03d}"] = f"{prefix}/{i + 500:03d}"
    for i in range(0, N_BGLAB, 2):
        ren[f"LAB/B{i:02d}"] = f"LAB/B{i + 50:02d}"
    for k, name in enumerate(TASK_NAMES):
        for j, code in enumerate(MOTIF_CODES[name]):
            if code.startswith("PROC/"):
                ren[code] = f"PROC/{1400 + 10 * k + (j % 4)}"
    return ren


@dataclass(frozen=True)
class SiteProfile:
    site_id: str
    n_patients: int
    seed: int
    age_kind: str = "pediatric"            # or "adult"
    prevalence: Mapping[str, float] = field(default_factory=lambda: dict(PREVALENCE_SITE_A))
    signal_odds: float = 20.0              # odds multiplier per planted motif
    motif_rate: float = 0.12
    inpatient_fraction: float = 0.6
    mean_events: float = 45.0
    dialect: Mapping[str, str] = field(default_factory=dict)
    reference_date: datetime = datetime(2023, 6, 1, tzinfo=timezone.utc)

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigError("n_patients must be positive")
        if self.age_kind not in ("pediatric", "adult"):
            raise ConfigError(f"unknown age_kind {self.age_kind!r}")
        missing = [t for t in TASK_NAMES if t not in self.prevalence]
        if missing:
            raise ConfigError(f"profile missing prevalence for: {', '.join(missing)}")
        for t, p in self.prevalence.items():
            if not 0.0 < p < 1.0:
                raise ConfigError(f"prevalence for {t} must be in (0,1), got {p}")
        if self.signal_odds < 1.0:
            raise ConfigError("signal_odds must be >= 1")
        if not 0.0 < self.motif_rate < 1.0:
            raise ConfigError("motif_rate must be in (0,1)")
        if not 0.0 < self.inpatient_fraction <= 1.0:
            raise ConfigError("inpatient_fraction must be in (0,1]")


@dataclass
class GroundTruth:
    site_id: str
    risks: dict[str, dict[str, float]]       # task -> patient -> latent risk
    labels: dict[str, dict[str, int]]        # task -> patient -> intended label
    motif_codes: dict[str, tuple[str, ...]]  # task -> site-local planted codes
    intercepts: dict[str, float]

    def prevalence(self, task: str) -> float:
        lv = self.labels[task]
        return sum(lv.values()) / len(lv)


def bayes_auroc(ground_truth: GroundTruth, task: str,
                patient_ids=None) -> float:
    """AUROC of the true latent risk against the realized labels.

    Upper-bounds any model's achievable AUROC in expectation. Constant risk
    (zero signal) scores exactly 0.5 through the tie rule.
    """
    if task not in ground_truth.risks:
        raise ConfigError(f"unknown task {task!r}")
    risks = ground_truth.risks[task]
    labels = ground_truth.labels[task]
    pids = sorted(risks) if patient_ids is None else sorted(patient_ids)
    y = np.array([labels[p] for p in pids], dtype=float)
    s = np.array([risks[p] for p in pids], dtype=float)
    if y.min() == y.max():
        raise DataError(f"{task}: ground-truth labels are single-class over this subset")
    if s.min() == s.max():
        return 0.5
    return auroc(s, y)


def _calibrate_intercept(scores: np.ndarray, uniforms: np.ndarray, target: float,
                         task: str) -> tuple[float, np.ndarray]:
    """Intercept realizing round(target * n) positives for labels u < expit(c + s).

    u < expit(c + s) is equivalent to c > logit(u) - s, so sorting those
    per-patient thresholds and splitting between order statistics m and m+1
    hits the count exactly.
    """
    n = len(scores)
    m = int(round(target * n))
    if m < 1:
        raise DataError(
            f"{task}: target prevalence {target} yields zero positives over "
            f"{n} eligible patients; raise the target or the site size")
    if m >= n:
        raise DataError(f"{task}: target prevalence {target} saturates the cohort")
    with np.errstate(divide="ignore"):
        thresholds = np.log(uniforms) - np.log1p(-uniforms) - scores
    order = np.sort(thresholds)
    c = 0.5 * (order[m - 1] + order[m])
    labels = (thresholds < c).astype(int)
    if int(labels.sum()) != m:
        raise DataError(f"{task}: intercept calibration failed (tied uniforms)")
    return float(c), labels


def _minute(dt: datetime) -> datetime:
    return dt.replace(second=0, microsecond=0)


def _r6(v: float) -> float:
    return float(f"{v:.6g}")


class _Pools:
    """Zipf-weighted background code sampler over the four pools."""

    def __init__(self):
        self.pools = {
            "DX": [f"DX/{i:03d}" for i in range(N_DX)],
            "MED": [f"MED/{i:03d}" for i in range(N_MED)],
            "PROC": [f"PROC/{i:03d}" for i in range(N_PROC)],
            "LAB": [f"LAB/B{i:02d}" for i in range(N_BGLAB)] + sorted(TASK_LAB_RANGES),
        }
        self.cum = {}
        for k, codes in self.pools.items():
            w = 1.0 / np.arange(1, len(codes) + 1) ** 1.3
            self.cum[k] = np.cumsum(w / w.sum())
        self.cat_cum = np.cumsum([0.40, 0.30, 0.15, 0.15])
        self.cats = ("DX", "MED", "PROC", "LAB")

    def draw(self, rng: np.random.Generator) -> str:
        cat = self.cats[int(np.searchsorted(self.cat_cum, rng.random(), side="right"))]
        idx = int(np.searchsorted(self.cum[cat], rng.random(), side="right"))
        return self.pools[cat][min(idx, len(self.pools[cat]) - 1)]


_POOLS = _Pools()


def _lab_value(code: str, rng: np.random.Generator, qualifying: bool = False
               ) -> tuple[float, str]:
    if code in TASK_LAB_RANGES:
        safe, quals = TASK_LAB_RANGES[code]
        lo, hi = quals if qualifying else safe
        unit = default_task_specs()[_LAB_TASK[code]].unit
        return _r6(rng.uniform(lo, hi)), unit
    return _r6(rng.uniform(0.0, 100.0)), "arb"


_LAB_TASK = {next(iter(spec.lab_codes)): name
             for name, spec in default_task_specs().items() if spec.kind == "lab"}


@dataclass
class _Draft:
    """Per-patient state from the demographic pass."""
    pid: str
    age_days: float
    inpatient: bool
    anchor: datetime
    n_background: int
    motif_fires: dict[str, tuple[bool, ...]]
    label_uniforms: dict[str, float]


def _demographic_pass(profile: SiteProfile) -> list[_Draft]:
    drafts = []
    for i in range(profile.n_patients):
        pid = f"{profile.site_id}-{i:05d}"
        rng = np.random.default_rng(derive_seed(profile.seed, "patient", pid))
        if profile.age_kind == "pediatric":
            age_days = rng.uniform(0.5, 18.0) * 365.25
        else:
            age_days = rng.uniform(18.0, 90.0) * 365.25
        inpatient = rng.random() < profile.inpatient_fraction
        offset_days = rng.uniform(30.0, 395.0)
        hour = rng.uniform(6.0, 22.0)
        anchor = _minute(profile.reference_date - timedelta(days=offset_days)
                         + timedelta(hours=hour))
        n_bg = int(np.clip(rng.lognormal(np.log(profile.mean_events), 0.9), 5, 400))
        fires = {t: tuple(rng.random(3) < profile.motif_rate) for t in TASK_NAMES}
        uniforms = {t: float(rng.random()) for t in TASK_NAMES}
        drafts.append(_Draft(pid, age_days, inpatient, anchor, n_bg, fires, uniforms))
    return drafts


def _label_pass(profile: SiteProfile, drafts: list[_Draft]
                ) -> tuple[dict[str, dict[str, int]], dict[str, dict[str, float]],
                           dict[str, float]]:
    """Calibrated labels over the intended cohorts, mortality before readmission."""
    log_odds = np.log(profile.signal_odds)
    inpat = [d for d in drafts if d.inpatient]
    if not inpat:
        raise DataError("profile generated no inpatients")
    labels: dict[str, dict[str, int]] = {}
    risks: dict[str, dict[str, float]] = {}
    intercepts: dict[str, float] = {}

    def run(task: str, members: list[_Draft], target: float):
        s = np.array([sum(d.motif_fires[task]) * log_odds for d in members])
        u = np.array([d.label_uniforms[task] for d in members])
        c, y = _calibrate_intercept(s, u, target, task)
        intercepts[task] = c
        labels[task] = {d.pid: int(y[j]) for j, d in enumerate(members)}
        risks[task] = {d.pid: float(1.0 / (1.0 + np.exp(-(c + s[j]))))
                       for j, d in enumerate(members)}

    # Readmission positives are alive by construction, so the downstream
    # index-pick coin removes mortality negatives only; shrink the mortality
    # target to land on target over the post-coin denominator.
    q_m = profile.prevalence["mortality"]
    q_r = profile.prevalence["readmission_30d"]
    run("mortality", inpat, q_m * (1.0 - q_r) / (1.0 - q_m * q_r))
    alive = [d for d in inpat if labels["mortality"][d.pid] == 0]
    if not alive:
        raise DataError("mortality target leaves no alive patients for readmission")
    # twice the target: the uniform index pick later sends about half of the
    # planted follow-up visits to label 0 (see module docstring)
    readm_target = min(2.0 * profile.prevalence["readmission_30d"], 0.9)
    run("readmission_30d", alive, readm_target)
    for task in TASK_NAMES:
        if task not in ("mortality", "readmission_30d"):
            run(task, inpat, profile.prevalence[task])
    return labels, risks, intercepts


def _event_pass(profile: SiteProfile, drafts: list[_Draft],
                labels: dict[str, dict[str, int]]
                ) -> tuple[dict[str, PatientTimeline], dict[str, list[Admission]]]:
    specs = default_task_specs()
    until_discharge = [t for t in TASK_NAMES
                       if specs[t].window_rule == "until_discharge" and t != "long_los"]
    timelines: dict[str, PatientTimeline] = {}
    admissions: dict[str, list[Admission]] = {}
    dialect = dict(profile.dialect)

    def rename(code: str) -> str:
        return dialect.get(code, code)

    for d in drafts:
        rng = np.random.default_rng(derive_seed(profile.seed, "events", d.pid))
        seen: set[tuple] = set()
        events: list[ClinicalEvent] = []

        def add(t: datetime, code: str, value=None, unit=None):
            ev = (format_time(t), code)
            if ev in seen:
                return
            seen.add(ev)
            events.append(ClinicalEvent(_minute(t), code, value, unit))

        hist_start = d.anchor - timedelta(days=3 * 365)
        for _ in range(d.n_background):
            t = hist_start + timedelta(minutes=float(rng.uniform(0, 3 * 365 * 24 * 60)))
            code = _POOLS.draw(rng)
            if code.startswith("LAB/"):
                v, unit = _lab_value(code, rng)
                add(t, rename(code), v, unit)
            else:
                add(t, rename(code))

        died = False
        adms: list[Admission] = []
        if d.inpatient:
            died = labels["mortality"][d.pid] == 1
            long_stay = labels["long_los"][d.pid] == 1
            los = rng.uniform(7.2, 20.0) if long_stay else rng.uniform(1.3, 6.5)
            start = d.anchor
            end = _minute(start + timedelta(days=float(los)))
            pt = prediction_time(Admission(d.pid, start, end, died), specs["mortality"])

            # planted panel chains vs scattered decoys: fired slots become
            # short chains of panel members minutes apart, late in the window
            # before the task's prediction time; decoy units land at isolated
            # uniform times so count features can't tell them from chains
            for task in TASK_NAMES:
                near_discharge = task == "readmission_30d"
                panel = MOTIF_CODES[task]
                lo = start + timedelta(minutes=10)
                if near_discharge:
                    hi = max(end - timedelta(minutes=5), lo + timedelta(minutes=1))
                    lo = max(lo, hi - timedelta(hours=24))
                else:
                    hi = max(pt - timedelta(minutes=5), lo + timedelta(minutes=1))
                span = (hi - lo).total_seconds() / 60.0

                def draw_unit():
                    n_codes = int(rng.integers(BURST_CODES[0], BURST_CODES[1] + 1))
                    return sorted(int(i) for i in
                                  rng.choice(PANEL_SIZE, size=n_codes, replace=False))

                used: list[float] = []
                for fired in d.motif_fires[task]:
                    if not fired:
                        continue
                    if near_discharge:
                        t0 = end - timedelta(minutes=float(rng.uniform(30, 360)))
                        t0 = max(t0, start + timedelta(minutes=5))
                    else:
                        off = rng.uniform(BURST_WINDOW[0] * span, BURST_WINDOW[1] * span)
                        t0 = lo + timedelta(minutes=float(off))
                    step = 0
                    for idx in draw_unit():
                        t = min(t0 + timedelta(minutes=step), hi)
                        add(t, rename(panel[idx]))
                        used.append((t - lo).total_seconds() / 60.0)
                        step += int(rng.integers(1, 4))
                # scattered members keep a gap from every same-panel event so
                # they can never read as a chain once fillers go in; members
                # that can't find a clear slot are dropped rather than placed
                for _ in range(int(rng.poisson(DECOY_RATE))):
                    for idx in draw_unit():
                        for _ in range(8):
                            off = float(rng.uniform(0, span))
                            if all(abs(off - u) >= FILLER_GAP for u in used):
                                used.append(off)
                                add(lo + timedelta(minutes=off), rename(panel[idx]))
                                break

            # ward course: a few observations on each day of the stay
            for _ in range(int(rng.integers(3, 8))):
                t = start + timedelta(minutes=float(
                    rng.uniform(10, max(11, (min(pt, end) - start).total_seconds() / 60 - 10))))
                code = _POOLS.draw(rng)
                if code.startswith("LAB/"):
                    v, unit = _lab_value(code, rng)
                    add(t, rename(code), v, unit)
                else:
                    add(t, rename(code))
            day = 1
            while start + timedelta(days=day) < end:
                for _ in range(int(rng.integers(2, 5))):
                    t = start + timedelta(days=day, minutes=float(rng.uniform(0, 12 * 60)))
                    if t >= end:
                        continue
                    code = _POOLS.draw(rng)
                    if code.startswith("LAB/"):
                        v, unit = _lab_value(code, rng)
                        add(t, rename(code), v, unit)
                    else:
                        add(t, rename(code))
                day += 1

            # lab outcomes land inside the label window [prediction time, end]
            for task in until_discharge:
                if specs[task].kind != "lab" or labels[task][d.pid] != 1:
                    continue
                lab_code = next(iter(specs[task].lab_codes))
                for _ in range(int(rng.integers(1, 3))):
                    f = rng.uniform(0.05, 0.95)
                    t = pt + (end - pt) * float(f)
                    v, unit = _lab_value(lab_code, rng, qualifying=True)
                    add(t, lab_code, v, unit)

            adms.append(Admission(d.pid, start, end, died))
            if labels["readmission_30d"].get(d.pid) == 1:
                f_start = _minute(end + timedelta(days=float(rng.uniform(1.5, 28.0))))
                f_start = f_start.replace(hour=int(rng.integers(7, 15)))
                f_end = f_start + timedelta(hours=float(rng.uniform(2.0, 6.0)))
                f_end = min(_minute(f_end), f_start.replace(hour=21))
                adms.append(Admission(d.pid, f_start, f_end, False))
                for _ in range(int(rng.integers(1, 4))):
                    t = f_start + timedelta(minutes=float(
                        rng.uniform(1, (f_end - f_start).total_seconds() / 60)))
                    add(t, rename(_POOLS.draw(rng)))

        if d.inpatient:
            _break_false_chains(events, rng, rename, add)

        birth = _minute(d.anchor - timedelta(days=d.age_days))
        tl = PatientTimeline(d.pid, birth, events)
        tl.sort()
        timelines[d.pid] = tl
        if adms:
            admissions[d.pid] = adms
    return timelines, admissions


_PANEL_OF = {code: name for name, panel in MOTIF_CODES.items() for code in panel}


def _break_false_chains(events, rng, rename, add) -> None:
    """Wedge one background event between distinct same-panel neighbors
    that are 5+ minutes apart, so chain adjacency stays an exact fire
    signature in token order (scattered decoys never mimic a chain)."""
    panel_of = {}
    for code, task in _PANEL_OF.items():
        panel_of[code] = task
        panel_of[rename(code)] = task
    snap = sorted(events, key=lambda e: (e.time, e.code))
    for prev, nxt in zip(snap, snap[1:]):
        pa = panel_of.get(prev.code)
        if pa is None or pa != panel_of.get(nxt.code) or prev.code == nxt.code:
            continue
        gap = (nxt.time - prev.time).total_seconds() / 60.0
        if gap < FILLER_GAP:
            continue
        t = prev.time + timedelta(minutes=int(gap // 2))
        before = len(events)
        for _ in range(8):
            code = _POOLS.draw(rng)
            if code.startswith("LAB/"):
                v, unit = _lab_value(code, rng)
                add(t, rename(code), v, unit)
            else:
                add(t, rename(code))
            if len(events) > before:
                break


def generate_site(profile: SiteProfile
                  ) -> tuple[dict[str, PatientTimeline], dict[str, list[Admission]], GroundTruth]:
    drafts = _demographic_pass(profile)
    labels, risks, intercepts = _label_pass(profile, drafts)
    timelines, admissions = _event_pass(profile, drafts, labels)
    dialect = dict(profile.dialect)
    motifs = {t: tuple(dialect.get(c, c) for c in MOTIF_CODES[t]) for t in TASK_NAMES}
    gt = GroundTruth(profile.site_id, risks, labels, motifs, intercepts)
    for task in TASK_NAMES:
        b = bayes_auroc(gt, task)
        if b < 0.5:
            raise DataError(f"{task}: Bayes AUROC {b:.3f} below 0.5; generator is broken")
    return timelines, admissions, gt


def write_ground_truth(path: str | os.PathLike, gt: GroundTruth) -> None:
    import csv
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("patient", "task", "latent_risk"))
        for task in TASK_NAMES:
            for pid in sorted(gt.risks[task]):
                w.writerow((pid, task, repr(gt.risks[task][pid])))


def read_ground_truth(path: str | os.PathLike) -> dict[str, dict[str, float]]:
    import csv
    out: dict[str, dict[str, float]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["patient", "task", "latent_risk"]:
            raise DataError(f"{path}: unexpected ground truth header {header}")
        for row in r:
            out.setdefault(row[1], {})[row[0]] = float(row[2])
    return out


def site_summary(profile: SiteProfile, gt: GroundTruth) -> dict:
    return {
        "site_id": profile.site_id,
        "n_patients": profile.n_patients,
        "seed": profile.seed,
        "age_kind": profile.age_kind,
        "signal_odds": profile.signal_odds,
        "n_renamed_codes": len(profile.dialect),
        "intended_prevalence": {t: gt.prevalence(t) for t in TASK_NAMES},
        "target_prevalence": {t: profile.prevalence[t] for t in TASK_NAMES},
        "bayes_auroc": {t: bayes_auroc(gt, t) for t in TASK_NAMES},
        "motif_codes": {t: list(gt.motif_codes[t]) for t in TASK_NAMES},
        "note": "readmission_30d intended prevalence is twice the target; the "
                "downstream index-admission pick halves it in expectation",
    }


def write_site(outdir: str | os.PathLike, profile: SiteProfile,
               timelines: dict[str, PatientTimeline],
               admissions: dict[str, list[Admission]], gt: GroundTruth) -> None:
    from .timelines import write_admissions, write_events, write_patients
    os.makedirs(outdir, exist_ok=True)
    write_events(os.path.join(outdir, "events.csv"), timelines)
    write_patients(os.path.join(outdir, "patients.csv"), timelines)
    write_admissions(os.path.join(outdir, "admissions.csv"), admissions)
    write_ground_truth(os.path.join(outdir, "ground_truth.csv"), gt)
    with open(os.path.join(outdir, "site_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(site_summary(profile, gt), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_site_profile(path: str | os.PathLike) -> SiteProfile:
    """Profile from flat key = value text; prevalence via preset name or per-task keys."""
    from .manifest import load_config, parse_bool
    cfg = load_config(path)
    prev_name = cfg.get("prevalence", "site_a")
    if prev_name in PREVALENCE_PRESETS:
        prevalence = dict(PREVALENCE_PRESETS[prev_name])
    else:
        raise ConfigError(f"unknown prevalence preset {prev_name!r}; "
                          f"choose from {sorted(PREVALENCE_PRESETS)}")
    for t in TASK_NAMES:
        key = f"prevalence.{t}"
        if key in cfg:
            prevalence[t] = float(cfg[key])
    dialect_name = cfg.get("dialect", "none")
    if dialect_name == "default":
        dialect = build_default_dialect()
    elif dialect_name == "none":
        dialect = {}
    else:
        raise ConfigError(f"unknown dialect {dialect_name!r}; use none or default")
    kwargs = {}
    for key, conv in (("signal_odds", float), ("motif_rate", float),
                      ("inpatient_fraction", float), ("mean_events", float),
                      ("age_kind", str)):
        if key in cfg:
            kwargs[key] = conv(cfg[key])
    return SiteProfile(
        site_id=cfg["site_id"],
        n_patients=int(cfg["n_patients"]),
        seed=int(cfg["seed"]),
        prevalence=prevalence,
        dialect=dialect,
        **kwargs,
    )
