"""Classification metrics, conformal coverage diagnostics, the two-sample K-S test and report files."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

N_CLASSES = 7
KS_TERMS = 100
SSC_BINS = {
    2: (1, 4, 8),
    5: (1, 2, 3, 4, 6, 8),
}


def _labels(preds, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).ravel()
    t = np.asarray(truths, dtype=np.int64).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def micro_f1(preds, truths) -> float:
    """Micro-averaged F1. For single-label multiclass data this is accuracy."""
    p, t = _labels(preds, truths)
    tp = int((p == t).sum())
    fp = fn = p.size - tp
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    micro_f1: float
    macro_f1: float
    per_class: dict[int, tuple[float, float, float]] = field(default_factory=dict)


def per_class_scores(preds, truths) -> dict[int, tuple[float, float, float]]:
    """(precision, recall, f1) for every class present in truths or predictions."""
    p, t = _labels(preds, truths)
    out = {}
    for c in sorted(set(p.tolist()) | set(t.tolist())):
        tp = int(((p == c) & (t == c)).sum())
        fp = int(((p == c) & (t != c)).sum())
        fn = int(((p != c) & (t == c)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[c] = (prec, rec, f1)
    return out


def macro_f1(preds, truths) -> float:
    """Mean per-class F1 over the classes that occur in truths or predictions."""
    scores = per_class_scores(preds, truths)
    return float(np.mean([f1 for _, _, f1 in scores.values()]))


def metric_report(preds, truths) -> MetricReport:
    return MetricReport(micro_f1(preds, truths), macro_f1(preds, truths), per_class_scores(preds, truths))


# --------------------------------------------------------------------------
# Coverage
# --------------------------------------------------------------------------


def _classes(s) -> tuple[int, ...]:
    return tuple(getattr(s, "classes", s))


def empirical_coverage(sets: Sequence, truths: Sequence[int]) -> float:
    if len(sets) != len(truths):
        raise ValueError(f"length mismatch: {len(sets)} sets vs {len(truths)} truths")
    if not sets:
        raise ValueError("empty input")
    return sum(int(y) in _classes(s) for s, y in zip(sets, truths)) / len(sets)


def range_sets(sets: Sequence) -> list[tuple[int, ...]]:
    """Contiguous filled ranges of the given sets, as class tuples."""
    out = []
    for s in sets:
        c = _classes(s)
        out.append(tuple(range(min(c), max(c) + 1)))
    return out


@dataclass
class Stratum:
    lo: int
    hi: int  # inclusive
    coverage: float
    count: int


def validate_bin_edges(edges: Sequence[int]) -> tuple[int, ...]:
    """Edges are ascending integers with ``edges[0] == 1`` and ``edges[-1] == 8``; bin i is [e_i, e_{i+1})."""
    edges = tuple(int(e) for e in edges)
    if len(edges) < 2 or edges[0] != 1 or edges[-1] != N_CLASSES + 1 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"invalid bin edges {list(edges)}: need strictly ascending 1 .. {N_CLASSES + 1}")
    return edges


def ssc(sets: Sequence, truths: Sequence[int], bin_edges: Sequence[int]) -> tuple[list[Stratum], float]:
    """Size-stratified coverage: per-bin coverage and the minimum over nonempty bins."""
    edges = validate_bin_edges(bin_edges)
    if len(sets) != len(truths):
        raise ValueError(f"length mismatch: {len(sets)} sets vs {len(truths)} truths")
    sizes = np.array([len(_classes(s)) for s in sets])
    hits = np.array([int(y) in _classes(s) for s, y in zip(sets, truths)])
    strata = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (sizes >= lo) & (sizes < hi)
        if mask.any():
            strata.append(Stratum(lo, hi - 1, float(hits[mask].mean()), int(mask.sum())))
    worst = min(s.coverage for s in strata) if strata else float("nan")
    return strata, worst


def set_size_histogram(sets: Sequence) -> list[int]:
    counts = [0] * N_CLASSES
    for s in sets:
        counts[len(_classes(s)) - 1] += 1
    return counts


def calibration_curve(
    eps_grid: Sequence[float],
    set_builder: Callable[[float], Sequence],
    truths: Sequence[int],
) -> list[tuple[float, float]]:
    """Observed error ``1 - coverage`` at each significance level.

    ``set_builder(eps)`` recalibrates at ``eps`` and returns the test sets.
    """
    grid = [float(e) for e in eps_grid]
    if not grid:
        raise ValueError("empty epsilon grid")
    if any(not 0.0 < e <= 1.0 for e in grid) or grid != sorted(grid):
        raise ValueError("epsilon grid must be ascending within (0, 1]")
    return [(e, 1.0 - empirical_coverage(set_builder(e), truths)) for e in grid]


@dataclass
class CoverageReport:
    marginal: float
    strata: dict[int, list[Stratum]]
    min_stratified: dict[int, float]
    curve: list[tuple[float, float]]
    histogram: list[int]


# --------------------------------------------------------------------------
# Kolmogorov-Smirnov
# --------------------------------------------------------------------------


def ks_statistic(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64))
    y = np.sort(np.asarray(y, dtype=np.float64))
    if x.size == 0 or y.size == 0:
        raise ValueError("K-S test needs two nonempty samples")
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / x.size
    fy = np.searchsorted(y, grid, side="right") / y.size
    return float(np.abs(fx - fy).max())


def kolmogorov_sf(lam: float, terms: int = KS_TERMS) -> float:
    """Survival function of the Kolmogorov distribution, truncated at ``terms`` terms.

    Uses ``2 sum (-1)^(k-1) exp(-2 k^2 lam^2)`` for lam >= 1 and the dual
    theta-function series of the CDF below that, where the alternating one
    converges slowly.
    """
    if lam <= 0:
        return 1.0
    k = np.arange(1, terms + 1, dtype=np.float64)
    if lam >= 1.0:
        s = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k * k * lam * lam))
    else:
        cdf = math.sqrt(2.0 * math.pi) / lam * np.sum(np.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8.0 * lam * lam)))
        s = 1.0 - cdf
    return float(min(max(s, 0.0), 1.0))


def ks_two_sample(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Two-sided statistic D and asymptotic p-value with effective size nm/(n+m)."""
    d = ks_statistic(x, y)
    n, m = len(x), len(y)
    if d == 0.0:
        return 0.0, 1.0
    return d, kolmogorov_sf(math.sqrt(n * m / (n + m)) * d)


# --------------------------------------------------------------------------
# Report files
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    from .dataset import atomic_write_text

    atomic_write_text(path, csv_text(header, rows))
    return path


@dataclass
class TimelineRow:
    t: int
    density: int
    true_label: int
    range_lo: int
    range_hi: int


def emit_report(
    directory: str | Path,
    metrics: Sequence[Mapping] = (),
    coverage: CoverageReport | None = None,
    timelines: Mapping[str, Sequence[TimelineRow]] | None = None,
    extra: Mapping[str, tuple[Sequence[str], Sequence[Sequence]]] | None = None,
) -> list[Path]:
    """Write the report CSVs; returns the paths written, in a stable order."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {directory}: {exc}") from exc
    written = []
    if metrics:
        cols = list(metrics[0].keys())
        written.append(write_csv(directory / "metrics.csv", cols, [[m[c] for c in cols] for m in metrics]))
    if coverage is not None:
        written.append(
            write_csv(
                directory / "set_size_hist.csv",
                ["size", "count"],
                [[i + 1, c] for i, c in enumerate(coverage.histogram)],
            )
        )
        for n_bins, strata in sorted(coverage.strata.items()):
            written.append(
                write_csv(
                    directory / f"ssc_{n_bins}.csv",
                    ["size_lo", "size_hi", "coverage", "count"],
                    [[s.lo, s.hi, s.coverage, s.count] for s in strata],
                )
            )
        written.append(write_csv(directory / "calibration_curve.csv", ["epsilon", "observed_error"], coverage.curve))
    for trial_id, rows in sorted((timelines or {}).items()):
        written.append(
            write_csv(
                directory / f"timeline_{trial_id}.csv",
                ["t", "density", "true_label", "range_lo", "range_hi"],
                [[r.t, r.density, r.true_label, r.range_lo, r.range_hi] for r in rows],
            )
        )
    for name, (header, rows) in sorted((extra or {}).items()):
        written.append(write_csv(directory / name, header, rows))
    return written
