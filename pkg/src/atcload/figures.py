"""PNG renderings of the report tables (set sizes, stratified coverage, calibration, timelines, model comparison).

Figures are drawn on the Agg canvas without pyplot, so rendering is
thread-safe and byte-identical across runs; PNG metadata is stripped.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

from matplotlib import rc_context  # noqa: E402
from matplotlib.backends.backend_agg import FigureCanvasAgg  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .evalkit import Stratum, TimelineRow  # noqa: E402

DPI = 100
STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "atcload",
}
METHOD_ORDER = ("lr-density", "lr-graphfeat", "mlp", "gcn", "evolvegcn-o", "evolvegcn-h")


def _new(width: float = 5.0, height: float = 3.2) -> tuple[Figure, object]:
    fig = Figure(figsize=(width, height), dpi=DPI)
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(1, 1, 1)


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def set_size_histogram(counts: Sequence[int], path: str | Path, title: str = "Prediction set sizes") -> Path:
    with rc_context(STYLE):
        fig, ax = _new()
        sizes = list(range(1, len(counts) + 1))
        ax.bar(sizes, counts, color="#4c72b0", width=0.7)
        ax.set_xticks(sizes)
        ax.set_xlabel("set size")
        ax.set_ylabel("test windows")
        ax.set_title(title)
        return _save(fig, path)


def ssc_bars(strata: Sequence[Stratum], alpha: float, path: str | Path, title: str = "Size-stratified coverage") -> Path:
    with rc_context(STYLE):
        fig, ax = _new()
        labels = [str(s.lo) if s.lo == s.hi else f"{s.lo}-{s.hi}" for s in strata]
        ax.bar(range(len(strata)), [s.coverage for s in strata], color="#55a868", width=0.6)
        ax.axhline(1 - alpha, color="#c44e52", linestyle="--", linewidth=1, label=f"target {1 - alpha:.2f}")
        ax.set_xticks(range(len(strata)))
        ax.set_xticklabels(labels)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("set size bin")
        ax.set_ylabel("coverage")
        ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def calibration_curve(curve: Sequence[tuple[float, float]], path: str | Path, title: str = "Calibration") -> Path:
    with rc_context(STYLE):
        fig, ax = _new(4.0, 4.0)
        eps = [e for e, _ in curve]
        ax.plot([0, 1], [0, 1], color="0.6", linewidth=1, linestyle=":")
        ax.plot(eps, [err for _, err in curve], marker="o", markersize=3, color="#4c72b0")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("significance level")
        ax.set_ylabel("observed error")
        ax.set_title(title)
        return _save(fig, path)


def timeline(rows: Sequence[TimelineRow], path: str | Path, title: str = "") -> Path:
    """Density (left axis) against true rating and the filled conformal range (right axis)."""
    with rc_context(STYLE):
        fig, ax = _new(6.0, 3.2)
        t = [r.t for r in rows]
        ax.plot(t, [r.density for r in rows], color="0.4", linewidth=1, label="aircraft")
        ax.set_xlabel("timestamp (5 s)")
        ax.set_ylabel("aircraft count")
        ax2 = ax.twinx()
        ax2.fill_between(
            t,
            [r.range_lo - 0.4 for r in rows],
            [r.range_hi + 0.4 for r in rows],
            step="mid",
            color="#8172b3",
            alpha=0.3,
            label="prediction range",
        )
        ax2.step(t, [r.true_label for r in rows], where="mid", color="#c44e52", linewidth=1.2, label="rating")
        ax2.set_ylim(0.5, 7.5)
        ax2.set_ylabel("workload rating")
        ax2.spines["right"].set_visible(True)
        ax.set_title(title)
        handles = ax.get_legend_handles_labels()[0] + ax2.get_legend_handles_labels()[0]
        ax.legend(handles=handles, loc="upper left")
        return _save(fig, path)


def method_comparison(rows: Sequence[Mapping], path: str | Path, metric: str = "micro_f1") -> Path:
    """Grouped bars of one metric per scenario and method."""
    scenarios = sorted({r["scenario"] for r in rows})
    methods = [m for m in METHOD_ORDER if any(r["method"] == m for r in rows)]
    value = {(r["scenario"], r["method"]): float(r[metric]) for r in rows}
    width = 0.8 / max(len(methods), 1)
    with rc_context(STYLE):
        fig, ax = _new(6.5, 3.4)
        for j, m in enumerate(methods):
            xs = [i + (j - (len(methods) - 1) / 2) * width for i in range(len(scenarios))]
            ax.bar(xs, [value.get((s, m), 0.0) for s in scenarios], width=width, label=m)
        ax.set_xticks(range(len(scenarios)))
        ax.set_xticklabels(scenarios)
        ax.set_ylim(0, 1)
        ax.set_ylabel(metric.replace("_", " "))
        ax.legend(ncol=3, loc="upper right")
        return _save(fig, path)
