"""Frequency-capped vocabularies, tokenization with OOV dropping, coverage reports."""

from __future__ import annotations

import csv
import hashlib
import os
from collections import Counter
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Mapping

from .errors import ConfigError, DataError
from .timelines import PatientTimeline

VOCAB_HEADER = ("rank", "code", "frequency")


@dataclass(frozen=True)
class Vocabulary:
    codes: tuple[str, ...]
    frequencies: tuple[int, ...]
    cap: int
    source_corpus_digest: str

    def __post_init__(self):
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.codes)})

    @property
    def index(self) -> dict[str, int]:
        return self._index

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def id_of(self, code: str) -> int:
        return self._index[code]

    @property
    def digest(self) -> str:
        """Digest of the ranked table itself; checkpoints pin this."""
        body = "\n".join(f"{i},{c},{f}" for i, (c, f) in
                         enumerate(zip(self.codes, self.frequencies)))
        return hashlib.sha256(body.encode()).hexdigest()


@dataclass(frozen=True)
class TokenSequence:
    patient_id: str
    ids: tuple[int, ...]
    times: tuple[datetime, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.times):
            raise DataError(f"token sequence for {self.patient_id}: ids/times length mismatch")

    def __len__(self) -> int:
        return len(self.ids)


def _count_codes(timelines: Iterable[PatientTimeline]) -> Counter:
    counts: Counter = Counter()
    for tl in timelines:
        for ev in tl.events:
            counts[ev.code] += 1
    return counts


def _corpus_digest(counts: Counter) -> str:
    body = "\n".join(f"{code},{counts[code]}" for code in sorted(counts))
    return hashlib.sha256(body.encode()).hexdigest()


def build_vocabulary(timelines: Iterable[PatientTimeline], cap: int) -> Vocabulary:
    """Rank codes by descending occurrence count, ties by ascending code string, keep top cap."""
    if cap < 1:
        raise ConfigError(f"vocabulary cap must be >= 1, got {cap}")
    counts = _count_codes(timelines)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return Vocabulary(
        codes=tuple(code for code, _ in ranked),
        frequencies=tuple(freq for _, freq in ranked),
        cap=cap,
        source_corpus_digest=_corpus_digest(counts),
    )


def tokenize(timeline: PatientTimeline, vocabulary: Vocabulary) -> TokenSequence:
    """Map in-vocabulary events to ids in timeline order; out-of-vocabulary events are dropped."""
    ids = []
    times = []
    index = vocabulary.index
    for ev in timeline.events:
        tid = index.get(ev.code)
        if tid is not None:
            ids.append(tid)
            times.append(ev.time)
    return TokenSequence(timeline.patient_id, tuple(ids), tuple(times))


def coverage_report(timelines: Iterable[PatientTimeline], vocabulary: Vocabulary) -> dict:
    """How much of a corpus the vocabulary can represent, plus what got dropped."""
    total = 0
    dropped: Counter = Counter()
    for tl in timelines:
        for ev in tl.events:
            total += 1
            if ev.code not in vocabulary:
                dropped[ev.code] += 1
    n_dropped = sum(dropped.values())
    return {
        "events_total": total,
        "events_dropped": n_dropped,
        "pct_dropped": (n_dropped / total) if total else None,
        "per_code": sorted(dropped.items(), key=lambda kv: (-kv[1], kv[0])),
    }


def write_vocabulary(path: str | os.PathLike, vocabulary: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# source_corpus_digest={vocabulary.source_corpus_digest}\n")
        fh.write(f"# cap={vocabulary.cap}\n")
        w = csv.writer(fh)
        w.writerow(VOCAB_HEADER)
        for rank, (code, freq) in enumerate(zip(vocabulary.codes, vocabulary.frequencies)):
            w.writerow((rank, code, freq))


def read_vocabulary(path: str | os.PathLike) -> Vocabulary:
    meta = {}
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header_seen = False
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
                continue
            parts = next(csv.reader([line]))
            if not header_seen:
                if parts != list(VOCAB_HEADER):
                    raise DataError(f"{path} line {lineno}: bad vocabulary header {parts}")
                header_seen = True
                continue
            if len(parts) != 3:
                raise DataError(f"{path} line {lineno}: expected 3 fields")
            rows.append(parts)
    if "source_corpus_digest" not in meta or "cap" not in meta:
        raise DataError(f"{path}: missing digest/cap header comments")
    for rank, (rank_s, _, _) in enumerate(rows):
        if int(rank_s) != rank:
            raise DataError(f"{path}: ranks not dense at {rank_s}")
    return Vocabulary(
        codes=tuple(code for _, code, _ in rows),
        frequencies=tuple(int(freq) for _, _, freq in rows),
        cap=int(meta["cap"]),
        source_corpus_digest=meta["source_corpus_digest"],
    )
