import csv
import json

import pytest

from atcload import cli, dataset, egcn


def call(*argv):
    lines = []
    code = cli.run([str(a) for a in argv], lines.append)
    return code, dict(line.split("=", 1) for line in lines), lines


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    code, _, lines = call("simulate", "--kind", "all", "--seed", 1, "--n-trials", 2, "--out", d)
    assert code == 0 and len(lines) == 8
    return d


def test_simulate_single_kind(tmp_path):
    code, kv, _ = call("simulate", "--kind", "baseline", "--seed", 1, "--out", tmp_path / "d")
    assert code == 0 and kv["trials"] == "1"
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == [
        "baseline-000.reports.json",
        "baseline-000.traffic.csv",
        "baseline-000.transcript.csv",
        "manifest.json",
    ]


def test_exit_codes(tmp_path, capsys):
    assert call("train", "--config", tmp_path / "missing.cfg")[0] == 2
    assert call("conformal", "--alpha", 0, "--data", tmp_path, "--checkpoint", tmp_path / "m", "--out", tmp_path / "o")[0] == 1
    assert call("simulate", "--bogus", 1)[0] == 1
    assert call("frobnicate")[0] == 1
    assert call()[0] == 1
    assert call("simulate")[0] == 1  # missing --out
    assert "usage" in capsys.readouterr().err


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "sub" / "sim.cfg"
    cfg.parent.mkdir()
    cfg.write_text("format_version = 1\n# comment\nkind = high-nominal  # trailing\nseed = 4\nout = data\n")
    values = cli.load_config(cfg, "simulate")
    assert values == {"kind": "high-nominal", "seed": 4, "out": cfg.parent.resolve() / "data"}
    for text, match in (
        ("colour = red\n", "unknown key"),
        ("seed = 1\nseed = 2\n", "twice"),
        ("seed = one\n", "cannot parse"),
        ("format_version = 9\n", "format_version"),
        ("kind = medium\n", "not one of"),
        ("just words\n", "key = value"),
    ):
        with pytest.raises(cli.ConfigError, match=match):
            cli.parse_config_text(text, "simulate")


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("kind = baseline\nseed = 2\nout = a\n")
    code, kv, _ = call("simulate", "--config", cfg, "--out", tmp_path / "b")
    assert code == 0
    assert (tmp_path / "b" / "baseline-000.reports.json").exists() and not (tmp_path / "a").exists()


def test_format_config_roundtrip():
    values = cli.resolve("report", {}, {"out": "/tmp/x"})
    text = cli.format_config(values, "report")
    back = cli.resolve("report", cli.parse_config_text(text, "report"), {})
    assert back == {**values, "out": back["out"]}


def test_build_dataset(corpus, tmp_path):
    code, kv, _ = call("build-dataset", "--data", corpus, "--kappa", 36, "--out", tmp_path)
    assert code == 0
    assert kv["windows"] == "530"
    assert (kv["train"], kv["validation"], kv["test"]) == ("212", "158", "160")
    rows = list(csv.DictReader(open(tmp_path / "split.csv")))
    assert len(rows) == 530 and set(r["part"] for r in rows) == {"train", "validation", "test"}
    assert len(dataset.parse_window_manifest((tmp_path / "windows.jsonl").read_text())) == 530


def _train(corpus, out, variant="O", extra=()):
    return call(
        "train", "--data", corpus, "--kappa", 6, "--stride", 12, "--variant", variant, "--epochs", 2,
        "--layer-dim", 4, "--n-layers", 1, "--seed", 3, "--out", out, *extra,
    )


def test_pipeline(corpus, tmp_path):
    ckpt = tmp_path / "model.json"
    code, kv, lines = _train(corpus, ckpt)
    assert code == 0 and kv["best_epoch"] in ("1", "2")
    assert [l for l in lines if l.startswith("epoch=")] == ["epoch=1", "epoch=2"]
    assert ckpt.exists() and (tmp_path / "model.history.csv").exists()

    common = ("--data", corpus, "--kappa", 6, "--stride", 12, "--checkpoint", ckpt)
    code, kv, _ = call("predict", *common, "--out", tmp_path / "pred.jsonl")
    assert code == 0
    rec = json.loads((tmp_path / "pred.jsonl").read_text().splitlines()[0])
    assert {"trial_id", "end_t", "label", "probs", "pred"} <= rec.keys()

    code, kv, _ = call("conformal", *common, "--alpha", 0.2, "--out", tmp_path / "conf.jsonl")
    assert code == 0 and 0.0 <= float(kv["coverage"]) <= 1.0
    recs = [json.loads(l) for l in (tmp_path / "conf.jsonl").read_text().splitlines()]
    assert {r["part"] for r in recs} == {"calibration", "test"}
    assert all(r["range"][0] <= r["label"] <= r["range"][1] or r["label"] not in r["set"] for r in recs)

    code, kv, _ = call("evaluate", "--predictions", tmp_path / "conf.jsonl", "--out", tmp_path / "rep")
    assert code == 0
    names = {p.name for p in (tmp_path / "rep").iterdir()}
    assert {"metrics.csv", "coverage.csv", "set_size_hist.csv", "ssc_2.csv", "ssc_5.csv", "calibration_curve.csv"} <= names
    figs = {p.name for p in (tmp_path / "rep" / "figures").iterdir()}
    assert {"set_size_hist.png", "ssc_2.png", "calibration_curve.png"} <= figs
    assert any(n.startswith("timeline_") for n in figs)
    assert (tmp_path / "rep" / "figures" / "ssc_5.png").read_bytes()[:4] == b"\x89PNG"

    assert call("predict", *common[:-2], "--checkpoint", tmp_path / "nope.json", "--out", tmp_path / "p")[0] == 2
    assert call("predict", "--data", corpus, "--kappa", 5, "--checkpoint", ckpt, "--out", tmp_path / "p")[0] == 1


def test_evaluate_rejects_prediction_only_file(corpus, tmp_path):
    ckpt = tmp_path / "model.json"
    _train(corpus, ckpt)
    call("predict", "--data", corpus, "--kappa", 6, "--stride", 12, "--checkpoint", ckpt, "--out", tmp_path / "p.jsonl")
    assert call("evaluate", "--predictions", tmp_path / "p.jsonl", "--out", tmp_path / "r")[0] == 1


def test_gcn_variant_is_o_without_evolution(corpus, tmp_path):
    _train(corpus, tmp_path / "gcn.json", "gcn")
    model = egcn.load_checkpoint(tmp_path / "gcn.json")
    assert model.variant == "O" and not model.evolve
    trials = dataset.load_trials(corpus, "high-nominal")
    windows = [w for t in trials for w in t.windows(6, 12)]
    sp = dataset.split(windows)
    cfg = egcn.TrainConfig(profile="high-nominal", epochs=2, n_layers=1, layer_dim=4, seed=3)
    direct = egcn.train(egcn.init_model("O", 6, 1, 4, cfg.dropout, 3, evolve=False), windows, sp, cfg)
    assert egcn.checkpoint_json(direct.model) == (tmp_path / "gcn.json").read_text()


def test_train_is_idempotent(corpus, tmp_path):
    _train(corpus, tmp_path / "a.json", "H")
    _train(corpus, tmp_path / "b.json", "H")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_rqa(corpus, tmp_path):
    code, kv, lines = call("rqa", "--transcript", corpus, "--out", tmp_path)
    assert code == 0 and sum(l.startswith("trial=") for l in lines) == 6
    rows = list(csv.DictReader(open(tmp_path / "rqa.csv")))
    assert len(rows) == 6 and all(0 <= float(r["rr"]) <= 1 for r in rows)
    assert len(list(tmp_path.glob("recurrence_*.csv"))) == 6
    one = corpus / "baseline-000.transcript.csv"
    assert call("rqa", "--transcript", one, "--out", tmp_path / "one")[0] == 0
    assert call("rqa", "--transcript", tmp_path / "none.csv", "--out", tmp_path / "x")[0] == 2
    assert call("rqa", "--transcript", one, "--radius", 0, "--out", tmp_path / "x")[0] == 1


def test_report_small(tmp_path):
    args = (
        "report", "--scenarios", "baseline", "--n-trials", 2, "--kappa", 4, "--stride", 20, "--epochs", 1,
        "--layer-dim", 4, "--mlp-epochs", 5, "--eps-steps", 4,
    )
    code, kv, lines = call(*args, "--out", tmp_path / "r")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "r" / "metrics.csv")))
    assert [r["method"] for r in rows] == list(cli.METHODS)
    sub = tmp_path / "r" / "baseline"
    assert (sub / "coverage.csv").exists() and (sub / "predictions.jsonl").exists()
    assert (tmp_path / "r" / "figures" / "micro_f1.png").exists()
    cfg = cli.load_config(tmp_path / "r" / "config.cfg", "report")
    assert cfg["kappa"] == 4 and cfg["scenarios"] == "baseline"
    assert call(*args, "--alpha", 1.5, "--out", tmp_path / "x")[0] == 1
    assert call(*args, "--scenarios", "mars", "--out", tmp_path / "x")[0] == 1


def test_report_stage_error_prefix(tmp_path, capsys):
    code, _, _ = call("report", "--scenarios", "baseline", "--n-trials", 1, "--kappa", 400, "--out", tmp_path)
    assert code == 1
    assert "build-dataset[baseline]" in capsys.readouterr().err


def test_emit_format():
    lines = []
    cli.emit(lines.append, out="x", value=0.5, n=3)
    assert lines == ["out=x", "value=0.500000", "n=3"]
