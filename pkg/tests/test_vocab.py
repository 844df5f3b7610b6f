from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from ehrfm.errors import ConfigError, DataError
from ehrfm.timelines import ClinicalEvent, PatientTimeline
from ehrfm.vocab import (Vocabulary, build_vocabulary, coverage_report,
                         read_vocabulary, tokenize, write_vocabulary)

UTC = timezone.utc
T0 = datetime(2020, 1, 1, tzinfo=UTC)


def timeline_from_codes(pid, codes):
    events = [ClinicalEvent(T0 + timedelta(minutes=i), c) for i, c in enumerate(codes)]
    return PatientTimeline(pid, datetime(1990, 1, 1, tzinfo=UTC), events)


def brute_force_top_k(counts, cap):
    """Reference ranking: count descending, then code ascending, first cap entries."""
    items = list(counts.items())
    items.sort(key=lambda kv: kv[0])
    items.sort(key=lambda kv: kv[1], reverse=True)
    return items[:cap]


def test_top_k_matches_brute_force_on_random_tables():
    rng = np.random.default_rng(53)
    for _ in range(100):
        n_codes = int(rng.integers(1, 60))
        codes = [f"C{int(rng.integers(0, 200)):03d}" for _ in range(n_codes)]
        # low count range forces plenty of ties
        counts = {c: int(rng.integers(1, 6)) for c in set(codes)}
        stream = [c for c, k in counts.items() for _ in range(k)]
        rng.shuffle(stream)
        tl = timeline_from_codes("p0", stream)
        cap = int(rng.integers(1, len(counts) + 3))
        vocab = build_vocabulary([tl], cap)
        expect = brute_force_top_k(counts, cap)
        assert list(zip(vocab.codes, vocab.frequencies)) == expect


def test_ranking_tie_rule_is_code_order():
    tl = timeline_from_codes("p0", ["B", "A", "C", "A", "B", "C"])
    vocab = build_vocabulary([tl], 3)
    assert vocab.codes == ("A", "B", "C")
    assert vocab.frequencies == (2, 2, 2)


def test_cap_truncates():
    tl = timeline_from_codes("p0", ["A"] * 5 + ["B"] * 3 + ["C"])
    vocab = build_vocabulary([tl], 2)
    assert vocab.codes == ("A", "B")


def test_empty_corpus_and_bad_cap():
    tl = PatientTimeline("p0", datetime(1990, 1, 1, tzinfo=UTC), [])
    with pytest.raises(DataError):
        build_vocabulary([tl], 10)
    with pytest.raises(ConfigError):
        build_vocabulary([timeline_from_codes("p0", ["A"])], 0)


def test_tokenize_drops_exactly_oov():
    rng = np.random.default_rng(59)
    for _ in range(50):
        n = int(rng.integers(1, 80))
        stream = [f"C{int(rng.integers(0, 30)):02d}" for _ in range(n)]
        tl = timeline_from_codes("p1", stream)
        cap = int(rng.integers(1, 25))
        vocab = build_vocabulary([tl], cap)
        seq = tokenize(tl, vocab)
        kept = [ev for ev in tl.events if ev.code in vocab]
        assert len(seq) == len(kept)
        assert [vocab.codes[i] for i in seq.ids] == [ev.code for ev in kept]
        assert list(seq.times) == [ev.time for ev in kept]


def test_tokenize_preserves_order():
    tl = timeline_from_codes("p1", ["A", "B", "A", "C", "B"])
    vocab = build_vocabulary([tl], 10)
    seq = tokenize(tl, vocab)
    assert [vocab.codes[i] for i in seq.ids] == ["A", "B", "A", "C", "B"]


def test_coverage_report_counts_dropped():
    tl = timeline_from_codes("p1", ["A"] * 4 + ["B"] * 2 + ["C"])
    vocab = build_vocabulary([tl], 1)
    rep = coverage_report([tl], vocab)
    assert rep["events_total"] == 7
    assert rep["events_dropped"] == 3
    assert rep["per_code"] == [("B", 2), ("C", 1)]


def test_digest_changes_with_table():
    tl1 = timeline_from_codes("p1", ["A", "B"])
    tl2 = timeline_from_codes("p1", ["A", "B", "B"])
    v1 = build_vocabulary([tl1], 5)
    v2 = build_vocabulary([tl2], 5)
    assert v1.digest != v2.digest
    assert v1.digest == build_vocabulary([tl1], 5).digest


def test_vocabulary_io_round_trip(tmp_path):
    tl = timeline_from_codes("p1", ["A"] * 3 + ["B"] * 3 + ["C"])
    vocab = build_vocabulary([tl], 3)
    path = tmp_path / "vocab.csv"
    write_vocabulary(path, vocab)
    back = read_vocabulary(path)
    assert back.codes == vocab.codes
    assert back.frequencies == vocab.frequencies
    assert back.cap == vocab.cap
    assert back.source_corpus_digest == vocab.source_corpus_digest
    assert back.digest == vocab.digest
