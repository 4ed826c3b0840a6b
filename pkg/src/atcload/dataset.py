"""Label series, moving windows, splits and trial file formats."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import airspace
from .airspace import AirspaceGraph, TrafficSnapshot
from .numkit import Rng

FORMAT_VERSION = 1
STEP_SECONDS = 5
TRIAL_STEPS = 300
PROBE_STEPS = (36, 144, 252)
WINDOW_SIZE = 36
RATING_MIN, RATING_MAX = 1, 7
N_CLASSES = 7
SPLIT_RATIOS = (0.4, 0.3, 0.3)
SCENARIOS = ("baseline", "high-nominal", "high-offnominal")
SPLIT_MODES = ("contiguous", "random", "trial")


def clamp_rating(score):
    """Round half away from zero and clamp to the 1-7 rating scale (scalar or array)."""
    r = np.sign(score) * np.floor(np.abs(score) + 0.5)
    out = np.clip(r, RATING_MIN, RATING_MAX).astype(np.int64)
    return int(out) if np.ndim(out) == 0 else out


class DataFormatError(ValueError):
    """Malformed or invalid on-disk data."""


@dataclass(frozen=True)
class WorkloadReport:
    trial_id: str
    t: int
    rating: int

    def __post_init__(self):
        if not RATING_MIN <= self.rating <= RATING_MAX:
            raise ValueError(f"rating {self.rating} outside allowed range {RATING_MIN}-{RATING_MAX}")


@dataclass(frozen=True)
class WorkloadSeries:
    trial_id: str
    ratings: np.ndarray

    def __len__(self) -> int:
        return len(self.ratings)


@dataclass(frozen=True, eq=False)
class GraphWindow:
    trial_id: str
    end_t: int
    graphs: tuple[AirspaceGraph, ...]
    label: int
    scenario: str

    @property
    def start_t(self) -> int:
        return self.end_t - len(self.graphs) + 1


@dataclass(frozen=True)
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]
    ratios: tuple[float, float, float] = SPLIT_RATIOS


@dataclass
class Trial:
    """One simulated or recorded trial: traffic, workload reports and metadata."""

    trial_id: str
    scenario: str
    snapshots: list[TrafficSnapshot]
    reports: list[WorkloadReport]
    events: list[tuple[str, int]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.snapshots)

    def series(self) -> WorkloadSeries:
        return interpolate_labels(self.reports, self.n_steps)

    def graphs(self, edge_threshold: float = airspace.EDGE_THRESHOLD) -> list[AirspaceGraph]:
        return [airspace.graph_or_placeholder(s, edge_threshold) for s in self.snapshots]

    def windows(self, kappa: int = WINDOW_SIZE, stride: int = 1, edge_threshold: float = airspace.EDGE_THRESHOLD):
        return make_windows(self.graphs(edge_threshold), self.series(), kappa, stride, self.scenario)


def interpolate_labels(reports: Sequence[WorkloadReport], n_steps: int) -> WorkloadSeries:
    """Step function: each t takes the latest report at or before t; back-filled before the first."""
    if not reports:
        raise ValueError("no workload reports to interpolate")
    ts = [r.t for r in reports]
    if ts != sorted(ts):
        raise ValueError("reports must be sorted by t")
    for r in reports:
        if not 0 <= r.t < n_steps:
            raise ValueError(f"report at t={r.t} outside series 0..{n_steps - 1}")
    ratings = np.full(n_steps, reports[0].rating, dtype=np.int64)
    for r in reports:
        ratings[r.t :] = r.rating
    return WorkloadSeries(reports[0].trial_id, ratings)


def window_count(n_steps: int, kappa: int, stride: int) -> int:
    return (n_steps - kappa) // stride + 1


def make_windows(
    graphs: Sequence[AirspaceGraph],
    series: WorkloadSeries,
    kappa: int,
    stride: int = 1,
    scenario: str = "baseline",
) -> list[GraphWindow]:
    if kappa < 1 or stride < 1:
        raise ValueError(f"window size and stride must be >= 1 (got {kappa}, {stride})")
    n = len(graphs)
    if len(series) != n:
        raise ValueError(f"{n} graphs but {len(series)} labels")
    if n < kappa:
        raise ValueError(f"series of length {n} is shorter than the window size {kappa}")
    graphs = tuple(graphs)
    return [
        GraphWindow(series.trial_id, end, graphs[end - kappa + 1 : end + 1], int(series.ratings[end]), scenario)
        for end in range(kappa - 1, n, stride)
    ]


def _part_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int]:
    n_train = max(1, math.floor(ratios[0] * n))
    n_val = max(1, math.floor(ratios[1] * n))
    return n_train, n_val


def split(
    windows: Sequence[GraphWindow],
    ratios: Sequence[float] = SPLIT_RATIOS,
    seed: int = 0,
    mode: str = "contiguous",
) -> DatasetSplit:
    """Partition window indices into train/validation/test.

    ``contiguous`` cuts each trial's windows in end-t order; test windows
    that still overlap the last training window in time are moved to
    validation (the final test window always stays). ``random`` shuffles all
    windows; ``trial`` keeps every trial's windows together.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {list(ratios)}")
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")
    if len(windows) < 3:
        raise ValueError(f"need at least 3 windows to split, got {len(windows)}")
    ratios = tuple(float(r) for r in ratios)
    rng = Rng(seed)

    if mode == "random":
        order = rng.permutation(len(windows))
        n_train, n_val = _part_sizes(len(order), ratios)
        return DatasetSplit(
            sorted(order[:n_train]), sorted(order[n_train : n_train + n_val]), sorted(order[n_train + n_val :]), ratios
        )

    by_trial: dict[str, list[int]] = {}
    for i, w in enumerate(windows):
        by_trial.setdefault(w.trial_id, []).append(i)

    if mode == "trial":
        trials = sorted(by_trial)
        if len(trials) < 3:
            raise ValueError(f"trial-level split needs at least 3 trials, got {len(trials)}")
        order = [trials[i] for i in rng.permutation(len(trials))]
        n_train, n_val = _part_sizes(len(order), ratios)
        parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
        return DatasetSplit(*(sorted(i for t in p for i in by_trial[t]) for p in parts), ratios)

    train, val, test = [], [], []
    for trial_id in sorted(by_trial):
        idx = sorted(by_trial[trial_id], key=lambda i: windows[i].end_t)
        if len(idx) < 3:
            raise ValueError(f"trial {trial_id} has {len(idx)} windows; contiguous split needs 3")
        n_train, n_val = _part_sizes(len(idx), ratios)
        tr, va, te = idx[:n_train], idx[n_train : n_train + n_val], idx[n_train + n_val :]
        last_train_end = windows[tr[-1]].end_t
        while len(te) > 1 and windows[te[0]].start_t <= last_train_end:
            va.append(te.pop(0))
        train += tr
        val += va
        test += te
    return DatasetSplit(sorted(train), sorted(val), sorted(test), ratios)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_reports_json(trial: Trial) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "trial_id": trial.trial_id,
        "scenario": trial.scenario,
        "n_steps": trial.n_steps,
        "reports": [{"t": r.t, "rating": r.rating} for r in trial.reports],
        "events": [{"kind": k, "t": t} for k, t in trial.events],
    }
    return json.dumps(doc, indent=2) + "\n"


def parse_reports_json(text: str, source: str = "<reports>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{source}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise DataFormatError(f"{source}: expected a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"{source}: unsupported format_version {doc.get('format_version')!r}")
    for key in ("trial_id", "scenario", "reports"):
        if key not in doc:
            raise DataFormatError(f"{source}: missing field {key!r}")
    if doc["scenario"] not in SCENARIOS:
        raise DataFormatError(f"{source}: unknown scenario {doc['scenario']!r}")
    reports = []
    for i, r in enumerate(doc["reports"]):
        try:
            t, rating = r["t"], r["rating"]
        except (KeyError, TypeError):
            raise DataFormatError(f"{source}: reports[{i}] needs fields 't' and 'rating'") from None
        if not isinstance(t, int) or not isinstance(rating, int):
            raise DataFormatError(f"{source}: reports[{i}] fields must be integers")
        try:
            reports.append(WorkloadReport(doc["trial_id"], t, rating))
        except ValueError as exc:
            raise DataFormatError(f"{source}: reports[{i}].rating: {exc}") from None
    doc["reports"] = reports
    doc["events"] = [(e["kind"], int(e["t"])) for e in doc.get("events", [])]
    return doc


def traffic_rows(trial: Trial):
    for snap in trial.snapshots:
        for a in snap.aircraft:
            yield trial.trial_id, a.t, a.callsign, a.x, a.y, a.altitude


def persist_trial(trial: Trial, directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    paths = {
        "traffic": directory / f"{trial.trial_id}.traffic.csv",
        "reports": directory / f"{trial.trial_id}.reports.json",
    }
    atomic_write_text(paths["traffic"], airspace.format_traffic_csv(traffic_rows(trial)))
    atomic_write_text(paths["reports"], format_reports_json(trial))
    return paths


def load_trial(directory: str | Path, trial_id: str) -> Trial:
    directory = Path(directory)
    rpath = directory / f"{trial_id}.reports.json"
    doc = parse_reports_json(rpath.read_text(encoding="utf-8"), str(rpath))
    tpath = directory / f"{trial_id}.traffic.csv"
    n_steps = doc.get("n_steps", TRIAL_STEPS)
    try:
        per_trial = airspace.parse_traffic_csv(tpath.read_text(encoding="utf-8"), n_steps)
    except airspace.TrafficFormatError as exc:
        raise DataFormatError(f"{tpath}: {exc}") from None
    snapshots = per_trial.get(trial_id, [TrafficSnapshot(t, ()) for t in range(n_steps)])
    return Trial(trial_id, doc["scenario"], snapshots, doc["reports"], doc["events"])


def list_trials(directory: str | Path) -> list[str]:
    return sorted(p.name[: -len(".reports.json")] for p in Path(directory).glob("*.reports.json"))


def load_trials(directory: str | Path, scenario: str | None = None) -> list[Trial]:
    trials = [load_trial(directory, tid) for tid in list_trials(directory)]
    if scenario is not None:
        trials = [t for t in trials if t.scenario == scenario]
    return trials


def format_window_manifest(windows: Sequence[GraphWindow]) -> str:
    lines = [
        json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "trial_id": w.trial_id,
                "scenario": w.scenario,
                "t_start": w.start_t,
                "t_end": w.end_t,
                "label": w.label,
            },
            sort_keys=True,
        )
        for w in windows
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_window_manifest(text: str) -> list[dict]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"line {lineno}: {exc.msg}") from None
        if rec.get("format_version") != FORMAT_VERSION:
            raise DataFormatError(f"line {lineno}: unsupported format_version {rec.get('format_version')!r}")
        out.append(rec)
    return out
