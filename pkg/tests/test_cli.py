import csv
import json
from pathlib import Path

import pytest

from trafficshift.cli import atomic_dir, main

DATA = Path(__file__).resolve().parents[1] / "src" / "trafficshift" / "data"

SYNTH = {
    "data": {"synthetic": {"n_regions": 2, "n_months": 3, "amplitude": 20.0, "noise": 0.1,
                           "start": [2023, 4], "grid_cols": 2}},
    "scenario": {"test_month": [2023, 6], "train_months": 2},
    "model": "tconv_graph",
    "train": {"max_epochs": 2, "batch_size": 256, "hidden": 8, "classifier_epochs": 1},
    "seeds": [0],
}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return path


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, SYNTH)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
    a = (tmp_path / "a" / "cube" / "values.csv").read_bytes()
    assert a == (tmp_path / "b" / "cube" / "values.csv").read_bytes()


def test_train_then_evaluate(tmp_path):
    cfg = write_config(tmp_path, SYNTH)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    run = tmp_path / "run"
    assert (run / "seed0" / "weights.csv").exists()
    trained = rows(run / "results.csv")
    assert len(trained) == 1 and trained[0]["variant"] == "full" and trained[0]["config_hash"]
    evaluate = dict(SYNTH, checkpoint=str(run / "seed0" / "checkpoint"))
    cfg2 = write_config(tmp_path, evaluate, "eval.json")
    assert main(["evaluate", "--config", str(cfg2), "--out", str(tmp_path / "eval")]) == 0
    evaluated = rows(tmp_path / "eval" / "results.csv")
    assert float(evaluated[0]["mae"]) == pytest.approx(float(trained[0]["mae"]), rel=1e-12)


def test_sweep_emits_nine_rows(tmp_path):
    cfg = dict(SYNTH, train=dict(SYNTH["train"], max_epochs=1))
    path = write_config(tmp_path, cfg)
    assert main(["sweep", "--config", str(path), "--out", str(tmp_path / "sweep")]) == 0
    out = rows(tmp_path / "sweep" / "sweep.csv")
    assert len(out) == 9
    assert {(float(r["alpha"]), float(r["beta"])) for r in out} == {(a, b) for a in (0.1, 1, 10) for b in (0.1, 1, 10)}
    best = json.loads((tmp_path / "sweep" / "best.json").read_text())["best"][0]
    assert best["val_mae"] == min(float(r["val_mae"]) for r in out)


def test_ablate_table(tmp_path):
    cfg = dict(SYNTH, variants=["full", "original"], train=dict(SYNTH["train"], max_epochs=1))
    path = write_config(tmp_path, cfg)
    assert main(["ablate", "--config", str(path), "--out", str(tmp_path / "abl")]) == 0
    assert [r["variant"] for r in rows(tmp_path / "abl" / "results.csv")] == ["full", "original"]


def test_malformed_json_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "model": "tconv_graph",\n  "seeds": [0,]\n}\n')
    assert main(["train", "--config", str(path)]) == 2
    assert f"{path}:3:" in capsys.readouterr().err


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = dict(SYNTH, train={"max_epochs": 1, "learning_rat": 0.1})
    path = write_config(tmp_path, cfg)
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    line = next(i for i, l in enumerate(path.read_text().splitlines(), 1) if "learning_rat" in l)
    assert f":{line}:" in err and "learning_rat" in err
    assert not (tmp_path / "x").exists()


def test_failed_run_leaves_no_output(tmp_path):
    target = tmp_path / "out"
    with pytest.raises(RuntimeError):
        with atomic_dir(target) as tmp:
            (tmp / "partial.txt").write_text("x")
            raise RuntimeError("boom")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_ingest_sample(tmp_path):
    cfg = json.loads((DATA / "toy_config.json").read_text())
    cfg["data"]["trips"]["csv"] = str(DATA / "sample_trips.csv")
    path = write_config(tmp_path, cfg)
    assert main(["ingest", "--config", str(path), "--out", str(tmp_path / "ing")]) == 0
    stats = json.loads((tmp_path / "ing" / "ingest.json").read_text())
    assert stats["rows"] == 10_000
    assert stats["kept_regions"] == ["0", "1"]
    assert stats["dropped_dropoffs"] > 0
