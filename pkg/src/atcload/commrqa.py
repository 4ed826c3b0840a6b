"""Closed-loop communication deviation coding and recurrence quantification."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

ROLES = ("atc", "pilot")
TRANSCRIPT_HEADER = ("speaker_role", "start", "end", "text")
DEFAULT_RADIUS = 0.1


class TranscriptError(ValueError):
    pass


@dataclass(frozen=True)
class CommEvent:
    speaker_role: str
    start: float
    end: float
    text: str
    deviation: int = 0

    def __post_init__(self):
        if self.speaker_role not in ROLES:
            raise ValueError(f"speaker role must be one of {ROLES}, got {self.speaker_role!r}")
        if self.end < self.start:
            raise ValueError(f"end time {self.end} before start time {self.start}")


@dataclass(frozen=True)
class RecurrenceMatrix:
    R: np.ndarray

    @property
    def n(self) -> int:
        return self.R.shape[0]


def parse_transcript(text: str) -> list[CommEvent]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    if tuple(h.strip() for h in header) != TRANSCRIPT_HEADER:
        raise TranscriptError(f"line 1: expected header {','.join(TRANSCRIPT_HEADER)}, got {header}")
    events = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise TranscriptError(f"line {lineno}: expected 4 fields, got {len(row)}")
        role, start, end, txt = row
        try:
            ev = CommEvent(role.strip(), float(start), float(end), txt)
        except ValueError as exc:
            raise TranscriptError(f"line {lineno}: {exc}") from None
        if events and ev.start < events[-1].start:
            raise TranscriptError(f"line {lineno}: start time {ev.start} precedes the previous event")
        events.append(ev)
    return events


def read_transcript(path: str | Path) -> list[CommEvent]:
    return parse_transcript(Path(path).read_text(encoding="utf-8"))


def format_transcript(events: Sequence[CommEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRANSCRIPT_HEADER)
    for e in events:
        w.writerow([e.speaker_role, f"{e.start:.1f}", f"{e.end:.1f}", e.text])
    return buf.getvalue()


def code_clcd(events: Sequence[CommEvent]) -> list[CommEvent]:
    """Mark an event as a deviation when the previous event has the same speaker role."""
    out = []
    prev = None
    for e in events:
        out.append(replace(e, deviation=int(prev is not None and prev.speaker_role == e.speaker_role)))
        prev = e
    return out


def recurrence_matrix(series: Sequence[float], radius: float = DEFAULT_RADIUS) -> RecurrenceMatrix:
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty series")
    if radius <= 0:
        raise ValueError("recurrence radius must be positive")
    return RecurrenceMatrix((np.abs(x[:, None] - x[None, :]) <= radius).astype(np.int8))


def rr(rm: RecurrenceMatrix) -> float:
    return float(rm.R.sum()) / rm.n**2


def _diagonal_lines(R: np.ndarray) -> list[int]:
    """Lengths of runs of ones on every diagonal except the main one."""
    n = R.shape[0]
    lengths = []
    for k in range(1, n):
        for diag in (np.diagonal(R, k), np.diagonal(R, -k)):
            padded = np.concatenate([[0], diag, [0]])
            edges = np.flatnonzero(np.diff(padded))
            lengths.extend((edges[1::2] - edges[::2]).tolist())
    return lengths


def det(rm: RecurrenceMatrix, l_min: int = 2) -> float:
    if l_min < 2:
        raise ValueError("l_min must be >= 2")
    lines = _diagonal_lines(rm.R)
    points = sum(lines)
    if points == 0:
        return 0.0
    return sum(l for l in lines if l >= l_min) / points


def max_l(rm: RecurrenceMatrix) -> int:
    lines = _diagonal_lines(rm.R)
    return max(lines, default=0)


@dataclass(frozen=True)
class RqaSummary:
    trial_id: str
    rr: float
    det: float
    maxl: int
    n_events: int
    n_deviations: int


def analyze(trial_id: str, events: Sequence[CommEvent], radius: float = DEFAULT_RADIUS, l_min: int = 2) -> RqaSummary:
    coded = code_clcd(events)
    dev = [e.deviation for e in coded]
    if not dev:
        return RqaSummary(trial_id, 0.0, 0.0, 0, 0, 0)
    rm = recurrence_matrix(dev, radius)
    return RqaSummary(trial_id, rr(rm), det(rm, l_min), max_l(rm), len(dev), int(sum(dev)))


RQA_HEADER = ("trial_id", "rr", "det", "maxl", "n_events", "n_deviations")


def format_rqa_csv(rows: Sequence[RqaSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RQA_HEADER)
    for r in rows:
        w.writerow([r.trial_id, f"{r.rr:.6f}", f"{r.det:.6f}", r.maxl, r.n_events, r.n_deviations])
    return buf.getvalue()


def format_matrix_csv(rm: RecurrenceMatrix) -> str:
    return "\n".join(",".join(str(int(v)) for v in row) for row in rm.R) + "\n"
