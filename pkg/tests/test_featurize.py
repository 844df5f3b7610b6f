from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from ehrfm.errors import ConfigError, DataError
from ehrfm.featurize import (SparseCountMatrix, WindowSpec, align_columns,
                             count_featurize, read_matrix, write_matrix)
from ehrfm.tasks import TaskCohort, TaskRow, TaskSpec
from ehrfm.timelines import ClinicalEvent, PatientTimeline

UTC = timezone.utc
DAY = timedelta(days=1)
PT = datetime(2020, 6, 15, 0, 0, tzinfo=UTC)


def make_cohort(rows):
    spec = TaskSpec("mortality", "operational")
    return TaskCohort(spec, rows, prevalence=None)


def brute_force_counts(events, pt, windows):
    """Reference recount: scan every event against every window interval."""
    out = {}
    for ev in events:
        if ev.time >= pt:
            continue
        lookback = (pt - ev.time) / DAY
        for w, (lo, hi) in enumerate(windows.bounds):
            if lookback > lo and (hi is None or lookback <= hi):
                out[(ev.code, w)] = out.get((ev.code, w), 0) + 1
                break
    return out


def test_window_spec_validation():
    WindowSpec()
    with pytest.raises(ConfigError):
        WindowSpec(bounds=((0.0, 1.0), (2.0, None)))
    with pytest.raises(ConfigError):
        WindowSpec(bounds=((0.0, 1.0), (1.0, 1.0), (1.0, None)))
    with pytest.raises(ConfigError):
        WindowSpec(bounds=((0.0, 1.0), (1.0, 7.0)))


def test_window_of_boundaries():
    w = WindowSpec()
    assert w.window_of(0.0) is None
    assert w.window_of(-1.0) is None
    assert w.window_of(0.5) == 0
    assert w.window_of(1.0) == 0
    assert w.window_of(1.0 + 1e-9) == 1
    assert w.window_of(7.0) == 1
    assert w.window_of(7.0 + 1e-9) == 2
    assert w.window_of(4000.0) == 2


def test_counts_match_brute_force_on_random_timelines():
    rng = np.random.default_rng(61)
    windows = WindowSpec()
    for trial in range(500):
        n_events = int(rng.integers(0, 60))
        events = []
        for _ in range(n_events):
            # cluster lookbacks around the window edges to hammer boundaries
            kind = rng.integers(0, 4)
            if kind == 0:
                lookback_days = float(rng.choice([0.0, 1.0, 7.0]))
            elif kind == 1:
                lookback_days = float(rng.choice([1.0, 7.0]) + rng.choice([-1, 1]) / 1440.0)
            else:
                lookback_days = float(rng.uniform(-2.0, 20.0))
            code = f"C{int(rng.integers(0, 8))}"
            events.append(ClinicalEvent(PT - timedelta(days=lookback_days), code))
        tl = PatientTimeline(f"p{trial}", datetime(1990, 1, 1, tzinfo=UTC),
                             sorted(events, key=lambda e: (e.time, e.code)))
        cohort = make_cohort([TaskRow(tl.patient_id, PT, 0, "train")])
        mat = count_featurize(cohort, {tl.patient_id: tl}, windows)
        expect = brute_force_counts(tl.events, PT, windows)
        got = {}
        dense = mat.matrix.toarray()[0]
        for key, col in mat.columns.items():
            if dense[col]:
                got[key] = int(dense[col])
        assert got == expect


def test_windows_partition_lookback():
    # every positive-lookback event lands in exactly one window
    rng = np.random.default_rng(67)
    windows = WindowSpec()
    for _ in range(300):
        lookback = float(rng.uniform(1e-6, 30.0))
        hits = [w for w, (lo, hi) in enumerate(windows.bounds)
                if lookback > lo and (hi is None or lookback <= hi)]
        assert len(hits) == 1
        assert windows.window_of(lookback) == hits[0]


def test_event_at_prediction_time_excluded():
    tl = PatientTimeline("p0", datetime(1990, 1, 1, tzinfo=UTC), [
        ClinicalEvent(PT, "AT"),
        ClinicalEvent(PT - timedelta(minutes=1), "BEFORE"),
        ClinicalEvent(PT + timedelta(minutes=1), "AFTER"),
    ])
    cohort = make_cohort([TaskRow("p0", PT, 0, "train")])
    mat = count_featurize(cohort, {"p0": tl})
    assert set(code for code, _ in mat.columns) == {"BEFORE"}


def test_multi_row_matrix_and_row_order():
    tl1 = PatientTimeline("p1", datetime(1990, 1, 1, tzinfo=UTC),
                          [ClinicalEvent(PT - timedelta(hours=2), "A")])
    tl2 = PatientTimeline("p2", datetime(1990, 1, 1, tzinfo=UTC),
                          [ClinicalEvent(PT - timedelta(days=3), "A"),
                           ClinicalEvent(PT - timedelta(hours=1), "B")])
    rows = [TaskRow("p1", PT, 0, "train"), TaskRow("p2", PT, 1, "train")]
    mat = count_featurize(make_cohort(rows), {"p1": tl1, "p2": tl2})
    assert mat.row_patient_ids == ("p1", "p2")
    dense = mat.matrix.toarray()
    assert dense[0, mat.columns[("A", 0)]] == 1
    assert dense[1, mat.columns[("A", 1)]] == 1
    assert dense[1, mat.columns[("B", 0)]] == 1


def test_unknown_patient_raises():
    cohort = make_cohort([TaskRow("ghost", PT, 0, "train")])
    with pytest.raises(DataError, match="ghost"):
        count_featurize(cohort, {})


def test_align_columns_projects_onto_reference():
    tl_tr = PatientTimeline("p1", datetime(1990, 1, 1, tzinfo=UTC),
                            [ClinicalEvent(PT - timedelta(hours=2), "A"),
                             ClinicalEvent(PT - timedelta(hours=3), "B")])
    tl_te = PatientTimeline("p2", datetime(1990, 1, 1, tzinfo=UTC),
                            [ClinicalEvent(PT - timedelta(hours=2), "B"),
                             ClinicalEvent(PT - timedelta(hours=2), "ONLY_TEST")])
    train = count_featurize(make_cohort([TaskRow("p1", PT, 0, "train")]), {"p1": tl_tr})
    test = count_featurize(make_cohort([TaskRow("p2", PT, 0, "test")]), {"p2": tl_te})
    aligned = align_columns(test, train.columns)
    assert aligned.shape == (1, len(train.columns))
    assert aligned.columns == train.columns
    assert aligned.dict_digest == train.dict_digest
    dense = aligned.matrix.toarray()[0]
    assert dense[train.columns[("B", 0)]] == 1
    assert dense[train.columns[("A", 0)]] == 0
    # the column unknown to the reference is gone
    assert dense.sum() == 1


def test_matrix_io_round_trip(tmp_path):
    rng = np.random.default_rng(71)
    timelines = {}
    rows = []
    for i in range(10):
        pid = f"p{i}"
        events = [ClinicalEvent(PT - timedelta(hours=float(rng.uniform(1, 200))),
                                f"C{int(rng.integers(0, 5))}")
                  for _ in range(int(rng.integers(0, 20)))]
        timelines[pid] = PatientTimeline(pid, datetime(1990, 1, 1, tzinfo=UTC),
                                         sorted(events, key=lambda e: (e.time, e.code)))
        rows.append(TaskRow(pid, PT, 0, "train"))
    mat = count_featurize(make_cohort(rows), timelines)
    path = tmp_path / "train.features.csv"
    write_matrix(path, mat)
    back = read_matrix(path, list(mat.row_patient_ids))
    assert back.columns == mat.columns
    assert back.row_patient_ids == mat.row_patient_ids
    assert (back.matrix != mat.matrix).nnz == 0
    assert back.dict_digest == mat.dict_digest
