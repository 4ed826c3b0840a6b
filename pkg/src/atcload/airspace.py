"""Airspace graphs from per-timestamp traffic snapshots."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HIGH_ALTITUDE_FT = 29_000.0
SCALE_LOW = 0.005
SCALE_HIGH = 0.0025
EDGE_THRESHOLD = 40.0
WEIGHT_FLOOR = 0.1
SEPARATION_CAP = 100.0
MAX_AIRCRAFT = 23
ALTITUDE_NORM = 30_000.0
N_FEATURES = 5
SECTOR_BOUND_NMI = 500.0
EARTH_RADIUS_NMI = 3440.065

TRAFFIC_HEADER = ("trial_id", "t", "callsign", "x_nmi", "y_nmi", "alt_ft")


class EmptyGraphError(ValueError):
    pass


class TrafficFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AircraftState:
    callsign: str
    t: int
    x: float
    y: float
    altitude: float

    def __post_init__(self):
        if self.altitude < 0:
            raise ValueError(f"{self.callsign}: negative altitude {self.altitude}")
        if abs(self.x) > SECTOR_BOUND_NMI or abs(self.y) > SECTOR_BOUND_NMI:
            raise ValueError(f"{self.callsign}: position ({self.x}, {self.y}) outside the sector bound")


@dataclass(frozen=True)
class TrafficSnapshot:
    t: int
    aircraft: tuple[AircraftState, ...]

    def __post_init__(self):
        signs = [a.callsign for a in self.aircraft]
        if len(set(signs)) != len(signs):
            raise ValueError(f"duplicate callsigns at t={self.t}")
        if len(signs) > MAX_AIRCRAFT:
            raise ValueError(f"{len(signs)} aircraft at t={self.t}; at most {MAX_AIRCRAFT} allowed")
        if any(a.t != self.t for a in self.aircraft):
            raise ValueError(f"snapshot t={self.t} contains aircraft from another timestamp")

    def __len__(self) -> int:
        return len(self.aircraft)


@dataclass(frozen=True, eq=False)
class AirspaceGraph:
    t: int
    node_ids: tuple[str, ...]
    adjacency: np.ndarray
    ahat: np.ndarray
    features: np.ndarray
    placeholder: bool = False

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


def scale_factor(alt_i: float, alt_j: float) -> float:
    if alt_i <= HIGH_ALTITUDE_FT and alt_j <= HIGH_ALTITUDE_FT:
        return SCALE_LOW
    return SCALE_HIGH


def scaled_distance(a: AircraftState, b: AircraftState) -> float:
    """Horizontal nmi and vertical ft folded into one nmi-equivalent distance."""
    if a.t != b.t:
        raise ValueError(f"timestamp mismatch: {a.callsign}@{a.t} vs {b.callsign}@{b.t}")
    d = math.hypot(a.x - b.x, a.y - b.y)
    s = scale_factor(a.altitude, b.altitude)
    return math.sqrt(d * d + (s * (a.altitude - b.altitude)) ** 2)


def _pairwise(aircraft: Sequence[AircraftState]):
    xy = np.array([[a.x, a.y] for a in aircraft], dtype=np.float64)
    alt = np.array([a.altitude for a in aircraft], dtype=np.float64)
    horiz = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2))
    vert = np.abs(alt[:, None] - alt[None, :])
    high = (alt[:, None] > HIGH_ALTITUDE_FT) | (alt[None, :] > HIGH_ALTITUDE_FT)
    s = np.where(high, SCALE_HIGH, SCALE_LOW)
    scaled = np.sqrt(horiz**2 + (s * vert) ** 2)
    return horiz, vert, scaled


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetric normalization of the adjacency with self loops added."""
    a_tilde = adj + np.eye(adj.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def node_features(snapshot: TrafficSnapshot) -> np.ndarray:
    """Per-aircraft [min scaled sep, min horizontal sep, min vertical sep, density, altitude].

    Separations are capped at 100 and divided by 100; vertical separation is
    measured in thousands of feet before capping.
    """
    ac = snapshot.aircraft
    n = len(ac)
    if n == 0:
        raise EmptyGraphError(f"no aircraft at t={snapshot.t}")
    feats = np.empty((n, N_FEATURES))
    if n == 1:
        feats[:, 0:3] = 1.0
    else:
        horiz, vert, scaled = _pairwise(ac)
        off = ~np.eye(n, dtype=bool)
        for col, m in enumerate((scaled, horiz, vert / 1000.0)):
            mins = np.where(off, m, np.inf).min(axis=1)
            feats[:, col] = np.minimum(mins, SEPARATION_CAP) / SEPARATION_CAP
    feats[:, 3] = n / MAX_AIRCRAFT
    feats[:, 4] = [a.altitude / ALTITUDE_NORM for a in ac]
    return feats


def build_graph(snapshot: TrafficSnapshot, edge_threshold: float = EDGE_THRESHOLD) -> AirspaceGraph:
    ac = snapshot.aircraft
    n = len(ac)
    if n == 0:
        raise EmptyGraphError(f"no aircraft at t={snapshot.t}")
    _, _, scaled = _pairwise(ac)
    adj = np.where(scaled <= edge_threshold, 1.0 / np.maximum(scaled, WEIGHT_FLOOR), 0.0)
    np.fill_diagonal(adj, 0.0)
    return AirspaceGraph(
        t=snapshot.t,
        node_ids=tuple(a.callsign for a in ac),
        adjacency=adj,
        ahat=normalize_adjacency(adj),
        features=node_features(snapshot),
    )


def placeholder_graph(t: int) -> AirspaceGraph:
    """Single zero-feature node standing in for an empty airspace."""
    return AirspaceGraph(
        t=t,
        node_ids=("<empty>",),
        adjacency=np.zeros((1, 1)),
        ahat=np.ones((1, 1)),
        features=np.zeros((1, N_FEATURES)),
        placeholder=True,
    )


def graph_or_placeholder(snapshot: TrafficSnapshot, edge_threshold: float = EDGE_THRESHOLD) -> AirspaceGraph:
    if len(snapshot) == 0:
        return placeholder_graph(snapshot.t)
    return build_graph(snapshot, edge_threshold)


def latlon_to_local(lat: float, lon: float, origin_lat: float, origin_lon: float) -> tuple[float, float]:
    """Equirectangular projection to (x east, y north) in nautical miles."""
    phi0 = math.radians(origin_lat)
    x = math.radians(lon - origin_lon) * math.cos(phi0) * EARTH_RADIUS_NMI
    y = math.radians(lat - origin_lat) * EARTH_RADIUS_NMI
    return x, y


# --------------------------------------------------------------------------
# Traffic CSV
# --------------------------------------------------------------------------


def format_traffic_csv(rows: Iterable[tuple[str, int, str, float, float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAFFIC_HEADER)
    for trial_id, t, callsign, x, y, alt in rows:
        w.writerow([trial_id, t, callsign, repr(float(x)), repr(float(y)), repr(float(alt))])
    return buf.getvalue()


def parse_traffic_csv(text: str, n_steps: int | None = None) -> dict[str, list[TrafficSnapshot]]:
    """Parse traffic rows into per-trial snapshot lists indexed by t.

    Timestamps with no rows become empty snapshots. ``n_steps`` fixes the
    series length; otherwise it is ``max(t) + 1`` per trial.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != TRAFFIC_HEADER:
        raise TrafficFormatError(f"line 1: expected header {','.join(TRAFFIC_HEADER)}, got {header}")
    by_trial: dict[str, dict[int, list[AircraftState]]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(TRAFFIC_HEADER):
            raise TrafficFormatError(f"line {lineno}: expected {len(TRAFFIC_HEADER)} fields, got {len(row)}")
        trial_id, t, callsign, x, y, alt = row
        try:
            state = AircraftState(callsign, int(t), float(x), float(y), float(alt))
        except ValueError as exc:
            raise TrafficFormatError(f"line {lineno}: {exc}") from None
        if state.t < 0:
            raise TrafficFormatError(f"line {lineno}: negative timestamp {state.t}")
        by_trial.setdefault(trial_id, {}).setdefault(state.t, []).append(state)
    out = {}
    for trial_id, per_t in by_trial.items():
        length = n_steps if n_steps is not None else max(per_t) + 1
        if max(per_t) >= length:
            raise TrafficFormatError(f"trial {trial_id}: timestamp {max(per_t)} beyond series length {length}")
        try:
            out[trial_id] = [TrafficSnapshot(t, tuple(per_t.get(t, ()))) for t in range(length)]
        except ValueError as exc:
            raise TrafficFormatError(f"trial {trial_id}: {exc}") from None
    return out


def read_traffic_csv(path: str | Path, n_steps: int | None = None) -> dict[str, list[TrafficSnapshot]]:
    return parse_traffic_csv(Path(path).read_text(encoding="utf-8"), n_steps)
