"""Command-line pipeline: simulate, build-dataset, train, predict, conformal, evaluate, rqa, report.

Every subcommand reads an optional flat ``key = value`` config file
(``--config``) and accepts the same keys as ``--flags``; flags win over the
file. Relative paths in a config file resolve against the file's directory.
Diagnostics go to stdout as ``key=value`` lines. Exit codes: 0 success,
1 invalid input or usage, 2 file system errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, baselines, commrqa, conformal, dataset, egcn, evalkit, figures, simgen
from .dataset import GraphWindow, atomic_write_text
from .evalkit import CoverageReport, TimelineRow

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
CONFIG_VERSION = 1
METHODS = ("lr-density", "lr-graphfeat", "mlp", "gcn", "evolvegcn-o", "evolvegcn-h")
PARTS = ("train", "validation", "test")


class ConfigError(ValueError):
    pass


class StageError(Exception):
    """A pipeline stage failed; ``code`` is the exit code of the underlying error."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.code = EXIT_IO if isinstance(exc, OSError) else EXIT_INVALID


# --------------------------------------------------------------------------
# Config keys
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Key:
    kind: str  # int, float, str, path, bool, opt-int, opt-float
    default: object
    help: str
    choices: tuple = ()


def _data_keys(stride: int = 1) -> dict[str, Key]:
    return {
        "data": Key("path", None, "directory of trial bundles"),
        "scenario": Key("str", "high-nominal", "scenario whose trials are used", dataset.SCENARIOS),
        "kappa": Key("int", dataset.WINDOW_SIZE, "window length in timestamps"),
        "stride": Key("int", stride, "window stride"),
        "split_mode": Key("str", "contiguous", "train/validation/test split", dataset.SPLIT_MODES),
        "split_seed": Key("int", 0, "seed of the random and trial splits"),
    }


_TRAIN_KEYS = {
    "variant": Key("str", "O", "O, H, or gcn (O without weight evolution)", ("O", "H", "gcn")),
    "profile": Key("str", "", "hyperparameter profile; empty uses the scenario's", ("",) + tuple(egcn.PROFILES)),
    "epochs": Key("int", 200, "training epochs"),
    "n_layers": Key("opt-int", None, "override the profile's layer count"),
    "layer_dim": Key("opt-int", None, "override the profile's layer width"),
    "dropout": Key("opt-float", None, "override the profile's dropout"),
    "learning_rate": Key("opt-float", None, "override the profile's learning rate"),
    "batch_size": Key("int", 16, "windows per Adam step"),
    "seed": Key("int", 0, "initialization and shuffling seed"),
}

KEYS: dict[str, dict[str, Key]] = {
    "simulate": {
        "kind": Key("str", "baseline", "scenario kind, or 'all'", dataset.SCENARIOS + ("all",)),
        "seed": Key("int", 0, "base seed"),
        "n_trials": Key("int", 1, "trials per scenario kind"),
        "out": Key("path", None, "output directory"),
    },
    "build-dataset": {**_data_keys(), "out": Key("path", None, "output directory for windows.jsonl and split.csv")},
    "train": {**_data_keys(), **_TRAIN_KEYS, "out": Key("path", None, "checkpoint path")},
    "predict": {
        **_data_keys(),
        "checkpoint": Key("path", None, "checkpoint written by train"),
        "part": Key("str", "test", "which split part to predict", PARTS + ("all",)),
        "out": Key("path", None, "predictions JSONL path"),
    },
    "conformal": {
        **_data_keys(),
        "checkpoint": Key("path", None, "checkpoint written by train"),
        "alpha": Key("float", 0.1, "tolerated error rate in (0, 1]"),
        "method": Key("str", "plain", "conformal score", conformal.METHODS),
        "out": Key("path", None, "predictions JSONL path"),
    },
    "evaluate": {
        "predictions": Key("path", None, "predictions JSONL written by conformal"),
        "eps_steps": Key("int", 20, "points on the calibration curve"),
        "figures": Key("bool", True, "render PNG figures"),
        "out": Key("path", None, "report directory"),
    },
    "rqa": {
        "transcript": Key("path", None, "transcript CSV or a directory of *.transcript.csv"),
        "radius": Key("float", commrqa.DEFAULT_RADIUS, "recurrence radius"),
        "l_min": Key("int", 2, "minimum diagonal line length"),
        "out": Key("path", None, "output directory"),
    },
    "report": {
        "scenarios": Key("str", ",".join(dataset.SCENARIOS), "comma-separated scenario kinds"),
        "n_trials": Key("int", 6, "simulated trials per scenario"),
        "seed": Key("int", 0, "corpus, split and model seed"),
        "kappa": Key("int", 12, "window length in timestamps"),
        "stride": Key("int", 3, "window stride"),
        "split_mode": Key("str", "random", "train/validation/test split", dataset.SPLIT_MODES),
        "epochs": Key("int", 40, "EvolveGCN training epochs"),
        "n_layers": Key("opt-int", None, "override the profile's layer count"),
        "layer_dim": Key("opt-int", 16, "override the profile's layer width (empty: profile)"),
        "dropout": Key("opt-float", 0.0, "override the profile's dropout (empty: profile)"),
        "learning_rate": Key("opt-float", 0.01, "override the profile's learning rate (empty: profile)"),
        "batch_size": Key("int", 32, "windows per Adam step"),
        "mlp_epochs": Key("int", 300, "MLP training epochs"),
        "alpha": Key("float", 0.1, "tolerated error rate in (0, 1]"),
        "method": Key("str", "plain", "conformal score", conformal.METHODS),
        "conformal_model": Key("str", "evolvegcn-o", "model whose probabilities are conformalized", METHODS[2:]),
        "eps_steps": Key("int", 20, "points on the calibration curve"),
        "figures": Key("bool", True, "render PNG figures"),
        "out": Key("path", None, "report directory"),
    },
}
COMMANDS = tuple(KEYS)


def _convert(name: str, key: Key, raw: str, base: Path | None):
    raw = raw.strip()
    try:
        if key.kind in ("opt-int", "opt-float") and raw in ("", "none", "profile"):
            return None
        if key.kind in ("int", "opt-int"):
            value = int(raw)
        elif key.kind in ("float", "opt-float"):
            value = float(raw)
        elif key.kind == "bool":
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            value = lowered in ("true", "1", "yes")
        elif key.kind == "path":
            p = Path(raw).expanduser()
            value = p if p.is_absolute() or base is None else base / p
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {key.kind}") from None
    if key.choices and value not in key.choices:
        raise ConfigError(f"{name}: {value!r} is not one of {', '.join(map(str, key.choices))}")
    return value


def parse_config_text(text: str, command: str, base: Path | None = None) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
    allowed = KEYS[command]
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        name, raw = (s.strip() for s in line.split("=", 1))
        name = name.replace("-", "_")
        if name == "format_version":
            if raw != str(CONFIG_VERSION):
                raise ConfigError(f"line {lineno}: config format_version {raw} is not supported")
            continue
        if name not in allowed:
            raise ConfigError(f"line {lineno}: unknown key {name!r} for {command}")
        if name in out:
            raise ConfigError(f"line {lineno}: key {name!r} given twice")
        out[name] = _convert(name, allowed[name], raw, base)
    return out


def load_config(path: str | Path, command: str) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_config_text(text, command, path.resolve().parent)


def format_config(values: dict, command: str) -> str:
    lines = [f"format_version = {CONFIG_VERSION}"]
    for name in KEYS[command]:
        v = values.get(name)
        if v is None:
            v = ""
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"


def resolve(command: str, file_values: dict, flag_values: dict) -> dict:
    values = {name: key.default for name, key in KEYS[command].items()}
    values.update(file_values)
    values.update({k: v for k, v in flag_values.items() if v is not None})
    missing = [n for n, k in KEYS[command].items() if k.kind == "path" and values[n] is None]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")
    return values


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def emit(sink: Callable[[str], None], /, **pairs) -> None:
    for k, v in pairs.items():
        sink(f"{k}={_fmt(v)}")


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")


def _check_window_settings(kappa: int, stride: int) -> None:
    if kappa < 1 or stride < 1:
        raise ConfigError(f"kappa and stride must be >= 1 (got {kappa}, {stride})")


def _windows_from_dir(values: dict) -> list[GraphWindow]:
    _check_window_settings(values["kappa"], values["stride"])
    trials = dataset.load_trials(values["data"], values["scenario"])
    if not trials:
        raise ConfigError(f"no {values['scenario']} trials in {values['data']}")
    return [w for t in trials for w in t.windows(values["kappa"], values["stride"])]


def _split(windows, values) -> dataset.DatasetSplit:
    return dataset.split(windows, seed=values["split_seed"], mode=values["split_mode"])


def _density(window: GraphWindow) -> int:
    last = window.graphs[-1]
    return 0 if last.placeholder else last.n_nodes


def prediction_record(window: GraphWindow, probs: np.ndarray, **extra) -> dict:
    rec = {"trial_id": window.trial_id, "end_t": window.end_t, "label": window.label, "density": _density(window)}
    rec["probs"] = [float(p) for p in probs]
    rec.update(extra)
    return rec


def format_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)


def conformal_records(windows, probs, calib, part: str) -> list[dict]:
    out = []
    for w, p in zip(windows, probs):
        s = conformal.predict_set(p, calib)
        lo, hi = s.filled_range
        out.append(
            prediction_record(
                w, p, set=list(s.classes), range=[lo, hi], alpha=calib.alpha, method=calib.method, part=part
            )
        )
    return out


# --------------------------------------------------------------------------
# Conformal diagnostics
# --------------------------------------------------------------------------


@dataclass
class Diagnostics:
    calib: conformal.CalibrationResult
    sets: list
    coverage: CoverageReport
    range_coverage: float
    ks_d: float
    ks_p: float

    def summary_rows(self) -> list[list]:
        return [
            ["method", self.calib.method],
            ["alpha", self.calib.alpha],
            ["n_calibration", self.calib.n],
            ["qhat", "full" if self.calib.full else self.calib.qhat],
            ["n_test", len(self.sets)],
            ["coverage_set", self.coverage.marginal],
            ["coverage_range", self.range_coverage],
            ["mean_set_size", float(np.mean([len(s) for s in self.sets]))],
            ["ssc_2_min", self.coverage.min_stratified[2]],
            ["ssc_5_min", self.coverage.min_stratified[5]],
            ["ks_d", self.ks_d],
            ["ks_p", self.ks_p],
        ]


def eps_grid(steps: int) -> list[float]:
    if steps < 1:
        raise ConfigError("eps_steps must be >= 1")
    return [(i + 1) / steps for i in range(steps)]


def diagnose(cal_probs, cal_y, test_probs, test_y, alpha: float, method: str, steps: int = 20) -> Diagnostics:
    """Calibrate on one part, build sets on the other, and collect every coverage statistic."""
    calib = conformal.calibrate(cal_probs, cal_y, alpha, method)
    sets = conformal.predict_sets(test_probs, calib)
    strata, mins = {}, {}
    for n_bins, edges in evalkit.SSC_BINS.items():
        strata[n_bins], mins[n_bins] = evalkit.ssc(sets, test_y, edges)
    cal_scores = conformal.conformal_scores(cal_probs, cal_y, method)

    def builder(eps):
        return conformal.predict_sets(test_probs, conformal.calibrate_scores(cal_scores, eps, method))

    curve = evalkit.calibration_curve(eps_grid(steps), builder, test_y)
    report = CoverageReport(
        evalkit.empirical_coverage(sets, test_y), strata, mins, curve, evalkit.set_size_histogram(sets)
    )
    d, p = evalkit.ks_two_sample(cal_scores, conformal.conformal_scores(test_probs, test_y, method))
    rng_cov = evalkit.empirical_coverage(evalkit.range_sets(sets), test_y)
    return Diagnostics(calib, sets, report, rng_cov, d, p)


def timelines(windows: Sequence[GraphWindow], sets) -> dict[str, list[TimelineRow]]:
    out: dict[str, list[TimelineRow]] = {}
    for w, s in sorted(zip(windows, sets), key=lambda ws: (ws[0].trial_id, ws[0].end_t)):
        lo, hi = s.filled_range
        out.setdefault(w.trial_id, []).append(TimelineRow(w.end_t, _density(w), w.label, lo, hi))
    return out


def write_diagnostics(directory: Path, diag: Diagnostics, lines, draw: bool, prefix: str = "") -> list[Path]:
    written = evalkit.emit_report(
        directory,
        coverage=diag.coverage,
        timelines=lines,
        extra={"coverage.csv": (["statistic", "value"], diag.summary_rows())},
    )
    if draw:
        fig_dir = directory / "figures"
        alpha = diag.calib.alpha
        written.append(figures.set_size_histogram(diag.coverage.histogram, fig_dir / "set_size_hist.png", prefix))
        for n_bins, strata in sorted(diag.coverage.strata.items()):
            written.append(figures.ssc_bars(strata, alpha, fig_dir / f"ssc_{n_bins}.png", f"{prefix} SSC, {n_bins} bins"))
        written.append(figures.calibration_curve(diag.coverage.curve, fig_dir / "calibration_curve.png", prefix))
        for trial_id, rows in sorted(lines.items()):
            written.append(figures.timeline(rows, fig_dir / f"timeline_{trial_id}.png", trial_id))
    return written


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_simulate(v: dict, out) -> int:
    """Generate synthetic trial bundles and a hashed manifest."""
    if v["n_trials"] < 1:
        raise ConfigError("n_trials must be >= 1")
    kinds = dataset.SCENARIOS if v["kind"] == "all" else (v["kind"],)
    manifest = simgen.generate_corpus(v["n_trials"], v["seed"], v["out"], kinds)
    emit(out, trials=len(manifest["trials"]), out=v["out"])
    for row in manifest["trials"]:
        emit(out, trial=row["trial_id"])
    return EXIT_OK


def cmd_build_dataset(v: dict, out) -> int:
    """Cut trials into moving windows and write the window list and split."""
    windows = _windows_from_dir(v)
    sp = _split(windows, v)
    outdir = Path(v["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(outdir / "windows.jsonl", dataset.format_window_manifest(windows))
    part_of = {}
    for part, idx in zip(PARTS, (sp.train, sp.validation, sp.test)):
        part_of.update({i: part for i in idx})
    evalkit.write_csv(
        outdir / "split.csv",
        ["index", "trial_id", "end_t", "label", "part"],
        [[i, w.trial_id, w.end_t, w.label, part_of[i]] for i, w in enumerate(windows)],
    )
    emit(out, windows=len(windows), train=len(sp.train), validation=len(sp.validation), test=len(sp.test))
    return EXIT_OK


def _train_config(v: dict) -> egcn.TrainConfig:
    return egcn.TrainConfig(
        profile=v["profile"] or v["scenario"],
        epochs=v["epochs"],
        learning_rate=v["learning_rate"],
        dropout=v["dropout"],
        n_layers=v["n_layers"],
        layer_dim=v["layer_dim"],
        seed=v["seed"],
        batch_size=v["batch_size"],
    )


def cmd_train(v: dict, out) -> int:
    """Train an EvolveGCN model (or the static GCN ablation) and save a checkpoint."""
    cfg = _train_config(v)
    windows = _windows_from_dir(v)
    sp = _split(windows, v)
    variant = "O" if v["variant"] == "gcn" else v["variant"]
    model = egcn.model_for_config(variant, v["kappa"], cfg, evolve=v["variant"] != "gcn")
    result = egcn.train(model, windows, sp, cfg, progress=lambda r: emit(out, epoch=r.epoch, loss=r.train_loss))
    path = Path(v["out"])
    egcn.save_checkpoint(result.model, path)
    atomic_write_text(path.with_suffix(".history.csv"), egcn.format_history_csv(result.history))
    best = result.history[result.best_epoch - 1] if result.best_epoch else None
    emit(out, best_epoch=result.best_epoch, checkpoint=path)
    if best is not None:
        emit(out, val_microf1=best.val_microf1, val_macrof1=best.val_macrof1)
    return EXIT_OK


def _load_model_and_windows(v: dict):
    model = egcn.load_checkpoint(v["checkpoint"])
    if model.kappa != v["kappa"]:
        raise ConfigError(f"checkpoint was trained with kappa={model.kappa}, config says {v['kappa']}")
    windows = _windows_from_dir(v)
    return model, windows, _split(windows, v)


def cmd_predict(v: dict, out) -> int:
    """Write class probabilities for one split part as JSONL."""
    model, windows, sp = _load_model_and_windows(v)
    idx = sorted(sp.train + sp.validation + sp.test) if v["part"] == "all" else getattr(sp, v["part"])
    chosen = [windows[i] for i in idx]
    probs = egcn.predict_proba(model, chosen)
    records = [prediction_record(w, p, pred=int(np.argmax(p)) + 1) for w, p in zip(chosen, probs)]
    atomic_write_text(v["out"], format_jsonl(records))
    y = [w.label for w in chosen]
    emit(out, windows=len(chosen), micro_f1=evalkit.micro_f1(probs.argmax(axis=1) + 1, y), out=v["out"])
    return EXIT_OK


def cmd_conformal(v: dict, out) -> int:
    """Calibrate on validation windows and write prediction sets for the test windows."""
    _check_alpha(v["alpha"])
    model, windows, sp = _load_model_and_windows(v)
    cal = [windows[i] for i in sp.validation]
    test = [windows[i] for i in sp.test]
    cal_p, test_p = egcn.predict_proba(model, cal), egcn.predict_proba(model, test)
    calib = conformal.calibrate(cal_p, [w.label for w in cal], v["alpha"], v["method"])
    records = conformal_records(cal, cal_p, calib, "calibration") + conformal_records(test, test_p, calib, "test")
    atomic_write_text(v["out"], format_jsonl(records))
    test_sets = [r["set"] for r in records if r["part"] == "test"]
    emit(
        out,
        qhat="full" if calib.full else calib.qhat,
        n_calibration=calib.n,
        n_test=len(test),
        coverage=evalkit.empirical_coverage(test_sets, [w.label for w in test]),
        out=v["out"],
    )
    return EXIT_OK


def _read_predictions(path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            for k in ("trial_id", "end_t", "label", "probs", "alpha", "method", "part"):
                rec[k]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path} line {lineno}: malformed prediction record ({exc})") from None
        records.append(rec)
    return records


def cmd_evaluate(v: dict, out) -> int:
    """Coverage diagnostics, metrics and figures from conformal predictions."""
    records = _read_predictions(v["predictions"])
    cal = [r for r in records if r["part"] == "calibration"]
    test = [r for r in records if r["part"] == "test"]
    if not cal or not test:
        raise ConfigError("predictions need both calibration and test records (run the conformal subcommand)")
    alpha, method = test[0]["alpha"], test[0]["method"]
    _check_alpha(alpha)
    cal_p, test_p = np.array([r["probs"] for r in cal]), np.array([r["probs"] for r in test])
    cal_y, test_y = [r["label"] for r in cal], [r["label"] for r in test]
    diag = diagnose(cal_p, cal_y, test_p, test_y, alpha, method, v["eps_steps"])
    preds = test_p.argmax(axis=1) + 1
    rep = evalkit.metric_report(preds, test_y)
    directory = Path(v["out"])
    evalkit.emit_report(directory, metrics=[{"micro_f1": rep.micro_f1, "macro_f1": rep.macro_f1, "n": len(test)}])
    lines: dict[str, list[TimelineRow]] = {}
    for r, s in sorted(zip(test, diag.sets), key=lambda rs: (rs[0]["trial_id"], rs[0]["end_t"])):
        lo, hi = s.filled_range
        lines.setdefault(r["trial_id"], []).append(TimelineRow(r["end_t"], r.get("density", 0), r["label"], lo, hi))
    write_diagnostics(directory, diag, lines, v["figures"])
    emit(out, micro_f1=rep.micro_f1, macro_f1=rep.macro_f1, coverage=diag.coverage.marginal, out=directory)
    return EXIT_OK


def _transcript_files(path: Path) -> list[tuple[str, Path]]:
    if path.is_dir():
        files = sorted(path.glob("*.transcript.csv"))
        if not files:
            raise ConfigError(f"no *.transcript.csv files in {path}")
        return [(f.name[: -len(".transcript.csv")], f) for f in files]
    if not path.exists():
        raise FileNotFoundError(f"transcript not found: {path}")
    name = path.name[: -len(".transcript.csv")] if path.name.endswith(".transcript.csv") else path.stem
    return [(name, path)]


def rqa_rows(files, radius: float, l_min: int) -> list[commrqa.RqaSummary]:
    return [commrqa.analyze(tid, commrqa.read_transcript(f), radius, l_min) for tid, f in files]


def cmd_rqa(v: dict, out) -> int:
    """Deviation coding and recurrence quantification of radio transcripts."""
    if v["radius"] <= 0:
        raise ConfigError("radius must be positive")
    if v["l_min"] < 2:
        raise ConfigError("l_min must be >= 2")
    files = _transcript_files(Path(v["transcript"]))
    rows = rqa_rows(files, v["radius"], v["l_min"])
    directory = Path(v["out"])
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_text(directory / "rqa.csv", commrqa.format_rqa_csv(rows))
    for (tid, f), row in zip(files, rows):
        events = commrqa.code_clcd(commrqa.read_transcript(f))
        if events:
            rm = commrqa.recurrence_matrix([e.deviation for e in events], v["radius"])
            atomic_write_text(directory / f"recurrence_{tid}.csv", commrqa.format_matrix_csv(rm))
        emit(out, trial=tid, rr=row.rr, det=row.det, maxl=row.maxl)
    return EXIT_OK


# --------------------------------------------------------------------------
# End-to-end report
# --------------------------------------------------------------------------


def _scenario_config(v: dict, scenario: str, seed: int) -> egcn.TrainConfig:
    return egcn.TrainConfig(
        profile=scenario,
        epochs=v["epochs"],
        learning_rate=v["learning_rate"],
        dropout=v["dropout"],
        n_layers=v["n_layers"],
        layer_dim=v["layer_dim"],
        seed=seed,
        batch_size=v["batch_size"],
    )


def fit_all_methods(windows, sp, v: dict, scenario: str, seed: int) -> tuple[dict, dict, dict]:
    """Fit every compared method; returns (test predictions, test probabilities, training histories)."""
    train = [windows[i] for i in sp.train]
    test = [windows[i] for i in sp.test]
    preds, probs, hist = {}, {}, {}
    preds["lr-density"] = baselines.fit_lr_density(train).predict(test)
    preds["lr-graphfeat"] = baselines.fit_lr_graphfeat(train).predict(test)
    mlp = baselines.fit_mlp(train, epochs=v["mlp_epochs"], seed=seed)
    probs["mlp"] = {"validation": mlp.predict_proba([windows[i] for i in sp.validation]), "test": mlp.predict_proba(test)}
    preds["mlp"] = probs["mlp"]["test"].argmax(axis=1) + 1
    cfg = _scenario_config(v, scenario, seed)
    for method, variant, evolve in (("gcn", "O", False), ("evolvegcn-o", "O", True), ("evolvegcn-h", "H", True)):
        model = egcn.model_for_config(variant, v["kappa"], cfg, evolve)
        result = egcn.train(model, windows, sp, cfg)
        hist[method] = result.history
        probs[method] = {
            "validation": egcn.predict_proba(result.model, [windows[i] for i in sp.validation]),
            "test": egcn.predict_proba(result.model, test),
        }
        preds[method] = probs[method]["test"].argmax(axis=1) + 1
    return preds, probs, hist


def _report_scenario(args: tuple[dict, str, int]) -> dict:
    v, scenario, k_idx = args
    try:
        trials = [g.trial for g in simgen.corpus_trials(v["n_trials"], v["seed"], scenario)]
        windows = [w for t in trials for w in t.windows(v["kappa"], v["stride"])]
        sp = dataset.split(windows, seed=v["seed"], mode=v["split_mode"])
    except (ValueError, OSError) as exc:
        raise StageError(f"build-dataset[{scenario}]", exc) from exc
    try:
        preds, probs, hist = fit_all_methods(windows, sp, v, scenario, v["seed"])
    except (ValueError, OSError) as exc:
        raise StageError(f"train[{scenario}]", exc) from exc
    test = [windows[i] for i in sp.test]
    test_y = [w.label for w in test]
    rows = []
    for method in METHODS:
        rep = evalkit.metric_report(preds[method], test_y)
        rows.append(
            {"method": method, "scenario": scenario, "seed": v["seed"], "micro_f1": rep.micro_f1, "macro_f1": rep.macro_f1}
        )
    cal = [windows[i] for i in sp.validation]
    chosen = probs[v["conformal_model"]]
    try:
        diag = diagnose(
            chosen["validation"], [w.label for w in cal], chosen["test"], test_y, v["alpha"], v["method"], v["eps_steps"]
        )
    except ValueError as exc:
        raise StageError(f"conformal[{scenario}]", exc) from exc
    records = conformal_records(test, chosen["test"], diag.calib, "test")
    return {
        "scenario": scenario,
        "rows": rows,
        "diag": diag,
        "lines": timelines(test, diag.sets),
        "records": records,
        "hist": hist,
    }


def _workers() -> int:
    raw = os.environ.get("EGCN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"EGCN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("EGCN_THREADS must be >= 1")
    return n


def end_to_end(v: dict, out=lambda s: None) -> Path:
    """Simulate, fit every method per scenario, conformalize, and write the full report directory."""
    _check_alpha(v["alpha"])
    _check_window_settings(v["kappa"], v["stride"])
    if v["n_trials"] < 1:
        raise ConfigError("n_trials must be >= 1")
    scenarios = [s.strip() for s in v["scenarios"].split(",") if s.strip()]
    bad = [s for s in scenarios if s not in dataset.SCENARIOS]
    if bad or not scenarios:
        raise ConfigError(f"unknown scenario(s) {bad}; expected a subset of {dataset.SCENARIOS}")
    directory = Path(v["out"])
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError("report", exc) from exc

    jobs = [(v, s, i) for i, s in enumerate(scenarios)]
    workers = min(_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_report_scenario, jobs))
    else:
        results = [_report_scenario(j) for j in jobs]

    metrics = [r for res in results for r in res["rows"]]
    evalkit.write_csv(
        directory / "metrics.csv",
        ["method", "scenario", "seed", "micro_f1", "macro_f1"],
        [[m["method"], m["scenario"], m["seed"], m["micro_f1"], m["macro_f1"]] for m in metrics],
    )
    for res in results:
        sub = directory / res["scenario"]
        write_diagnostics(sub, res["diag"], res["lines"], v["figures"], res["scenario"])
        atomic_write_text(sub / "predictions.jsonl", format_jsonl(res["records"]))
        for method, history in sorted(res["hist"].items()):
            atomic_write_text(sub / f"history_{method}.csv", egcn.format_history_csv(history))
        emit(out, scenario=res["scenario"], coverage=res["diag"].coverage.marginal)

    try:
        rqa = [
            commrqa.analyze(g.trial.trial_id, g.transcript)
            for s in scenarios
            for g in simgen.corpus_trials(v["n_trials"], v["seed"], s)
        ]
    except ValueError as exc:
        raise StageError("rqa", exc) from exc
    atomic_write_text(directory / "rqa.csv", commrqa.format_rqa_csv(rqa))
    if v["figures"]:
        figures.method_comparison(metrics, directory / "figures" / "micro_f1.png", "micro_f1")
        figures.method_comparison(metrics, directory / "figures" / "macro_f1.png", "macro_f1")
    atomic_write_text(directory / "config.cfg", format_config({**v, "out": "."}, "report"))
    for m in metrics:
        emit(out, method=m["method"], scenario=m["scenario"], micro_f1=m["micro_f1"], macro_f1=m["macro_f1"])
    return directory


def cmd_report(v: dict, out) -> int:
    """Run the whole comparison for each scenario and write a report directory."""
    directory = end_to_end(v, out)
    emit(out, out=directory)
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "predict": cmd_predict,
    "conformal": cmd_conformal,
    "evaluate": cmd_evaluate,
    "rqa": cmd_rqa,
    "report": cmd_report,
}

# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="atcload",
        description=__doc__.splitlines()[0],
        epilog="EGCN_THREADS caps the worker processes used by report (default 1).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    for command, keys in KEYS.items():
        doc = HANDLERS[command].__doc__
        p = sub.add_parser(command, help=doc, description=doc)
        p.add_argument("--config", help="flat key = value config file")
        for name, key in keys.items():
            default = "required" if key.kind == "path" and key.default is None else key.default
            hint = f"{key.help} (default: {default})"
            if key.choices:
                hint += f"; one of {', '.join(c for c in map(str, key.choices) if c)}"
            p.add_argument("--" + name.replace("_", "-"), dest=name, metavar=key.kind.upper(), help=hint)
    return parser


def run(argv: Sequence[str] | None = None, out: Callable[[str], None] | None = None) -> int:
    out = out or (lambda s: print(s, flush=True))
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    command = ns.command
    try:
        file_values = load_config(ns.config, command) if ns.config else {}
        flag_values = {}
        for name, key in KEYS[command].items():
            raw = getattr(ns, name)
            if raw is not None:
                flag_values[name] = _convert(name, key, raw, None)
        values = resolve(command, file_values, flag_values)
        return HANDLERS[command](values, out)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())
