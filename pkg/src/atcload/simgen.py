"""Synthetic approach-control trials: two merging arrival flows, probe ratings and radio transcripts.

The label model reuses the published density relation (slope 0.306, bias
-3.373) plus conflict and off-nominal terms, so that density, separation
and dynamics all carry signal for the predictors.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import airspace, commrqa, dataset
from .airspace import AircraftState, TrafficSnapshot
from .commrqa import CommEvent
from .dataset import PROBE_STEPS, STEP_SECONDS, TRIAL_STEPS, Trial, WorkloadReport, clamp_rating
from .numkit import Rng, derive_seed

KINDS = dataset.SCENARIOS
MAX_AIRCRAFT = {"baseline": 6, "high-nominal": 21, "high-offnominal": 21}
EVENT_KINDS = ("turbulence", "nordo", "runway-switch", "min-fuel")

DENSITY_SLOPE = 0.306
DENSITY_BIAS = -3.373
CONFLICT_WEIGHT = 1.5
CONFLICT_DISTANCE = 5.0
EVENT_BOOST = 1.0
EVENT_HALF_WIDTH = 24
NOISE_VALUES = (-1, 0, 1)
NOISE_PROBS = (0.15, 0.7, 0.15)

# waypoints (x nmi, y nmi, altitude ft, groundspeed kn on the leg that ends here);
# both flows converge on the merge point, stacked 2000 ft apart
MERGE = (0.0, 0.0)
FLOWS = {
    "west": ((-95.0, 10.0, 15000.0, 250.0), (-30.0, 4.0, 9000.0, 250.0), (*MERGE, 4000.0, 180.0)),
    "southeast": ((70.0, -70.0, 16000.0, 250.0), (22.0, -22.0, 10000.0, 250.0), (*MERGE, 6000.0, 180.0)),
}
ALTITUDE_OFFSETS = (-1000.0, 0.0, 1000.0)
SPAWN_MEAN_STEPS = {"baseline": 60.0, "high-nominal": 26.0, "high-offnominal": 26.0}
MIN_SPAWN_GAP_STEPS = 20
WARMUP_STEPS = {"baseline": (60, 180), "high-nominal": (60, 240), "high-offnominal": (60, 240)}
AIRLINES = ("AAL", "SWA", "UAL", "DAL", "ASA", "SKW", "FFT", "JBU", "BAW", "ASH")

DEVIATION_BASE = {"baseline": 0.06, "high-nominal": 0.14, "high-offnominal": 0.14}
DEVIATION_EVENT = 0.4
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OffNominalEvent:
    kind: str
    t: int


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str
    seed: int
    duration: int = TRIAL_STEPS
    events: tuple[OffNominalEvent, ...] = ()

    @property
    def max_aircraft(self) -> int:
        return MAX_AIRCRAFT[self.kind]

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.duration < max(PROBE_STEPS) + 1:
            raise ConfigError(f"duration {self.duration} too short for probe at t={max(PROBE_STEPS)}")
        if self.kind != "high-offnominal":
            if self.events:
                raise ConfigError(f"{self.kind} trials have no off-nominal events")
            return
        if len(self.events) != 4:
            raise ConfigError(f"off-nominal trials need exactly 4 events, got {len(self.events)}")
        ts = [e.t for e in self.events]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("off-nominal events must be strictly time-ordered")
        if self.events[-1].kind != "min-fuel":
            raise ConfigError("the minimum-fuel event must come last")
        if sorted(e.kind for e in self.events) != sorted(EVENT_KINDS):
            raise ConfigError(f"off-nominal events must be one each of {EVENT_KINDS}")
        if not all(0 <= t < self.duration for t in ts):
            raise ConfigError("event time outside the trial")


def default_events(rng: Rng, duration: int = TRIAL_STEPS) -> tuple[OffNominalEvent, ...]:
    """One of each event; the first three in random order, minimum fuel near the end."""
    slots = [(40, 90), (100, 150), (160, 210)]
    order = rng.permutation(3)
    events = []
    for slot, k in zip(slots, order):
        lo, hi = slot
        events.append(OffNominalEvent(EVENT_KINDS[k], lo + rng.integer(hi - lo)))
    lo = int(duration * 0.85)
    events.append(OffNominalEvent("min-fuel", lo + rng.integer(duration - 5 - lo)))
    return tuple(events)


def make_config(kind: str, seed: int, duration: int = TRIAL_STEPS) -> ScenarioConfig:
    if kind not in KINDS:
        raise ConfigError(f"unknown scenario kind {kind!r}")
    events = default_events(Rng(derive_seed(seed, 0x657674)), duration) if kind == "high-offnominal" else ()
    cfg = ScenarioConfig(kind, seed, duration, events)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# Label model
# --------------------------------------------------------------------------


def has_conflict(snapshot: TrafficSnapshot) -> bool:
    ac = snapshot.aircraft
    for i in range(len(ac)):
        for j in range(i + 1, len(ac)):
            if airspace.scaled_distance(ac[i], ac[j]) < CONFLICT_DISTANCE:
                return True
    return False


def near_event(t: int, events: Sequence[OffNominalEvent]) -> bool:
    return any(abs(t - e.t) <= EVENT_HALF_WIDTH for e in events)


def synthetic_workload(n_aircraft: int, conflict: bool, event_boost: bool, noise: int = 0) -> int:
    score = DENSITY_SLOPE * n_aircraft + DENSITY_BIAS + CONFLICT_WEIGHT * conflict + EVENT_BOOST * event_boost + noise
    return clamp_rating(score)


def draw_noise(rng: Rng) -> int:
    return rng.choice(NOISE_VALUES, NOISE_PROBS)


# --------------------------------------------------------------------------
# Kinematics
# --------------------------------------------------------------------------


@dataclass
class _Flight:
    callsign: str
    flow: str
    speed_factor: float
    lateral: float
    alt_offset: float = 0.0
    leg: int = 0
    frac: float = 0.0
    spawned: int = 0

    def position(self) -> tuple[float, float, float]:
        pts = FLOWS[self.flow]
        a, b = pts[self.leg], pts[self.leg + 1]
        x = a[0] + (b[0] - a[0]) * self.frac
        y = a[1] + (b[1] - a[1]) * self.frac
        alt = a[2] + (b[2] - a[2]) * self.frac
        return x, y + self.lateral, alt + self.alt_offset

    def advance(self) -> bool:
        """Move one step; False once the flight has left the final leg."""
        pts = FLOWS[self.flow]
        dist = pts[self.leg + 1][3] * self.speed_factor * STEP_SECONDS / 3600.0
        while dist > 0:
            a, b = pts[self.leg], pts[self.leg + 1]
            length = math.hypot(b[0] - a[0], b[1] - a[1])
            remaining = (1.0 - self.frac) * length
            if dist < remaining:
                self.frac += dist / length
                return True
            dist -= remaining
            self.leg += 1
            self.frac = 0.0
            if self.leg + 1 >= len(pts):
                return False
        return True


@dataclass
class GeneratedTrial:
    trial: Trial
    transcript: list[CommEvent]
    config: ScenarioConfig
    counts: list[int] = field(default_factory=list)


def _simulate_traffic(cfg: ScenarioConfig, rng: Rng) -> tuple[list[TrafficSnapshot], list[tuple[int, str, str]]]:
    """Traffic snapshots plus radio triggers (t, callsign, reason)."""
    flights: list[_Flight] = []
    used: set[str] = set()
    triggers: list[tuple[int, str, str]] = []
    mean_gap = SPAWN_MEAN_STEPS[cfg.kind] * (0.75 + 0.5 * rng.uniform())
    # slow demand swings so density rises and falls within a trial
    phase = 2 * math.pi * rng.uniform()
    period = 120 + 120 * rng.uniform()
    # the sector is already partly filled when recording starts
    lo, hi = WARMUP_STEPS[cfg.kind]
    warmup = lo + rng.integer(hi - lo + 1)
    next_spawn = {
        flow: -warmup if flow == "west" else -warmup + MIN_SPAWN_GAP_STEPS + rng.integer(int(mean_gap)) for flow in FLOWS
    }

    def new_callsign() -> str:
        while True:
            cs = f"{AIRLINES[rng.integer(len(AIRLINES))]}{100 + rng.integer(9000)}"
            if cs not in used:
                used.add(cs)
                return cs

    snapshots = []
    for t in range(-warmup, cfg.duration):
        for flow in FLOWS:
            if t >= next_spawn[flow]:
                if len(flights) < cfg.max_aircraft:
                    f = _Flight(
                        new_callsign(),
                        flow,
                        0.98 + 0.04 * rng.uniform(),
                        2.0 * (rng.uniform() - 0.5),
                        ALTITUDE_OFFSETS[rng.integer(len(ALTITUDE_OFFSETS))],
                        spawned=t,
                    )
                    flights.append(f)
                    triggers.append((t, f.callsign, "checkin"))
                swing = 1.0 + 0.6 * math.sin(phase + 2 * math.pi * t / period)
                gap = MIN_SPAWN_GAP_STEPS + rng.exponential(max(mean_gap * swing - MIN_SPAWN_GAP_STEPS, 1.0))
                next_spawn[flow] = t + max(1, int(round(gap)))
        if t < 0:
            flights = [f for f in flights if f.advance()]
            continue
        states = []
        for f in flights:
            x, y, alt = f.position()
            states.append(AircraftState(f.callsign, t, round(x, 4), round(y, 4), round(alt, 1)))
        snapshots.append(TrafficSnapshot(t, tuple(states)))
        survivors = []
        for f in flights:
            leg = f.leg
            if f.advance():
                survivors.append(f)
                if f.leg != leg:
                    triggers.append((t + 1, f.callsign, "instruction"))
            else:
                triggers.append((t + 1, f.callsign, "handoff"))
        flights = survivors
    return snapshots, triggers


_PHRASES = {
    "checkin": ("{cs} with you descending via the arrival", "{cs} radar contact, descend and maintain eight thousand"),
    "instruction": ("{cs} descend and maintain four thousand, reduce speed two one zero", "down to four thousand, two one zero, {cs}"),
    "handoff": ("{cs} contact tower one one niner point niner", "over to tower, {cs}"),
}


def _transcript(cfg: ScenarioConfig, triggers, rng: Rng) -> list[CommEvent]:
    events: list[CommEvent] = []
    busy = 0.0
    for t, cs, reason in sorted(triggers):
        if t >= cfg.duration:
            continue
        p_dev = DEVIATION_EVENT if near_event(t, cfg.events) else DEVIATION_BASE[cfg.kind]
        atc_text, pilot_text = _PHRASES[reason]
        first, second = ("pilot", "atc") if reason == "checkin" else ("atc", "pilot")
        texts = {"atc": atc_text.format(cs=cs), "pilot": pilot_text.format(cs=cs)}
        if reason == "checkin":
            texts = {"pilot": atc_text.format(cs=cs), "atc": pilot_text.format(cs=cs)}
        sequence = [first, second]
        if rng.uniform() < p_dev:
            # unanswered call repeated, or a stepped-on readback
            sequence = [first, first, second] if rng.uniform() < 0.5 else [first, second, second]
        start = max(t * STEP_SECONDS + 2.0 * rng.uniform(), busy + 0.5)
        for role in sequence:
            dur = 1.5 + 2.5 * rng.uniform()
            events.append(CommEvent(role, round(start, 1), round(start + dur, 1), texts[role]))
            start = round(start + dur, 1) + 0.4 + 1.2 * rng.uniform()
        busy = start
    return events


def generate_trial(cfg: ScenarioConfig, trial_id: str | None = None) -> GeneratedTrial:
    cfg.validate()
    trial_id = trial_id or f"{cfg.kind}-s{cfg.seed}"
    rng = Rng(derive_seed(cfg.seed, 0x74726166))
    snapshots, triggers = _simulate_traffic(cfg, rng)
    label_rng = Rng(derive_seed(cfg.seed, 0x6C6162))
    reports = []
    for t in PROBE_STEPS:
        snap = snapshots[t]
        rating = synthetic_workload(len(snap), has_conflict(snap), near_event(t, cfg.events), draw_noise(label_rng))
        reports.append(WorkloadReport(trial_id, t, rating))
    transcript = _transcript(cfg, triggers, Rng(derive_seed(cfg.seed, 0x636F6D)))
    trial = Trial(trial_id, cfg.kind, snapshots, reports, [(e.kind, e.t) for e in cfg.events])
    return GeneratedTrial(trial, transcript, cfg, [len(s) for s in snapshots])


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def write_bundle(gen: GeneratedTrial, directory: str | Path) -> dict[str, Path]:
    paths = dataset.persist_trial(gen.trial, directory)
    tpath = Path(directory) / f"{gen.trial.trial_id}.transcript.csv"
    dataset.atomic_write_text(tpath, commrqa.format_transcript(gen.transcript))
    paths["transcript"] = tpath
    return paths


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_corpus(
    n_trials: int,
    base_seed: int,
    directory: str | Path,
    kinds: Sequence[str] = KINDS,
) -> dict:
    """Write ``n_trials`` bundles per kind plus ``manifest.json``; returns the manifest."""
    if n_trials < 1:
        raise ValueError("need at least one trial per scenario")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc}") from exc
    rows = []
    for k_idx, kind in enumerate(kinds):
        for i in range(n_trials):
            seed = derive_seed(base_seed, k_idx, i)
            trial_id = f"{kind}-{i:03d}"
            gen = generate_trial(make_config(kind, seed), trial_id)
            paths = write_bundle(gen, directory)
            rows.append(
                {
                    "trial_id": trial_id,
                    "scenario": kind,
                    "seed": seed,
                    "files": {p.name: sha256_file(p) for _, p in sorted(paths.items())},
                }
            )
    manifest = {"format_version": MANIFEST_VERSION, "base_seed": base_seed, "n_per_scenario": n_trials, "trials": rows}
    dataset.atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return manifest


def corpus_trials(n_trials: int, base_seed: int, kind: str) -> list[GeneratedTrial]:
    """In-memory equivalent of :func:`generate_corpus` for one kind (same seeds and ids)."""
    k_idx = KINDS.index(kind)
    return [
        generate_trial(make_config(kind, derive_seed(base_seed, k_idx, i)), f"{kind}-{i:03d}") for i in range(n_trials)
    ]
