import json
from pathlib import Path

import jsonschema
import pytest

from dsfernet.cli import main
from dsfernet.config import PRESETS
from dsfernet.data import read_image

DOCS = Path(__file__).resolve().parents[1] / "docs"

# a network small enough to train for a few steps in well under a second
TINY = [
    "--set", "encoder.stage_widths=[2,3,4,4,4]",
    "--set", "encoder.convs_per_stage=[1,1,1,1,1]",
    "--set", "dsfr.proj_dim=3",
    "--set", "loop.max_iters=4",
    "--set", "loop.batch_size=2",
    "--set", "loop.val_every=2",
    "--set", "schedule.decay_end_iter=4",
]


def schema(name):
    return json.loads((DOCS / f"{name}.schema.json").read_text())


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(root), "--seed", "5", "--n", "20", "--size", "32"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--set", f"data.root={dataset}", *TINY, "--out", str(out)])
    assert code == 0
    return out


def test_synth_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "3", "--n", "4", "--size", "32"]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b and len(a) == 12


def test_eval_perfect_predictions(dataset, tmp_path, capsys):
    preds = tmp_path / "preds"
    preds.mkdir()
    for p in (dataset / "label").glob("*.png"):
        (preds / p.name).write_bytes(p.read_bytes())
    out_json = tmp_path / "report.json"
    code = main(["eval", "--set", f"data.root={dataset}", "--pred-dir", str(preds), "--part", "all", "--json", str(out_json)])
    assert code == 0
    assert "F1: 100.00" in capsys.readouterr().out.splitlines()
    report = json.loads(out_json.read_text())
    jsonschema.validate(report, schema("eval_report"))
    assert report["percent"]["IoU"] == 100.0 and report["n_samples"] == 20


def test_train_outputs(trained):
    assert {"best.ckpt", "last.ckpt", "metrics.jsonl", "config.json", "test_metrics.json"} <= {p.name for p in trained.iterdir()}
    records = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in records] == [0, 1, 2, 3]
    assert ["val_F1" in r for r in records] == [False, True, False, True]
    for r in records:
        jsonschema.validate(r, schema("metrics_record"))
    jsonschema.validate(json.loads((trained / "config.json").read_text()), schema("config"))
    jsonschema.validate(json.loads((trained / "test_metrics.json").read_text()), schema("eval_report"))


def test_eval_checkpoint_matches_train_report(dataset, trained, tmp_path, capsys):
    out_json = tmp_path / "e.json"
    args = ["eval", "--set", f"data.root={dataset}", *TINY, "--checkpoint", str(trained / "best.ckpt"), "--json", str(out_json)]
    assert main(args) == 0
    printed = capsys.readouterr().out
    assert all(f"{k}: " in printed for k in ("P", "R", "F1", "OA", "IoU"))
    report = json.loads(out_json.read_text())
    expect = json.loads((trained / "test_metrics.json").read_text())
    assert report["confusion"] == expect["confusion"] and report["metrics"] == expect["metrics"]


def test_architecture_mismatch_exit_code(dataset, trained, capsys):
    args = ["eval", "--set", f"data.root={dataset}", *TINY, "--set", "dsfr.proj_dim=5", "--checkpoint", str(trained / "best.ckpt")]
    assert main(args) == 2
    assert "architecture" in capsys.readouterr().err


def test_infer_writes_images(dataset, trained, tmp_path):
    sid = sorted(p.stem for p in (dataset / "A").glob("*.png"))[0]
    out = tmp_path / "infer"
    code = main([
        "infer", "--checkpoint", str(trained / "best.ckpt"),
        "--t1", str(dataset / "A" / f"{sid}.png"), "--t2", str(dataset / "B" / f"{sid}.png"),
        "--label", str(dataset / "label" / f"{sid}.png"), "--out", str(out),
    ])
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert names == {f"{sid}_prob.png", f"{sid}_binary.png", f"{sid}_confusion.png"}
    rgb = read_image(out / f"{sid}_confusion.png")
    colours = {tuple(c) for c in (rgb.reshape(3, -1).T * 255).round().astype(int)}
    assert colours <= {(255, 255, 255), (0, 255, 255), (0, 0, 0), (255, 0, 0)}


def test_viz_hopfield(dataset, trained, tmp_path):
    sid = sorted(p.stem for p in (dataset / "A").glob("*.png"))[3]
    out = tmp_path / "viz"
    code = main(["viz-hopfield", "--set", f"data.root={dataset}", *TINY, "--checkpoint", str(trained / "best.ckpt"),
                 "--sample-id", sid, "--out", str(out)])
    assert code == 0
    assert {p.name for p in out.iterdir()} == {f"{sid}_FR4.png", f"{sid}_FR5.png", f"{sid}_panel.png"}


def test_error_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "loop": {"batch": 3}\n}\n')
    assert main(["train", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "loop.batch" in err and "line 2" in err
    assert main(["eval", "--set", f"data.root={tmp_path / 'nowhere'}", "--pred-dir", str(tmp_path)]) == 3
    assert main(["synth", "--out", str(tmp_path / "s"), "--size", "40"]) == 2


def test_thread_limit_env(monkeypatch, dataset, tmp_path):
    monkeypatch.setenv("DSFER_THREADS", "1")
    assert main(["synth", "--out", str(tmp_path / "t"), "--n", "1", "--size", "16"]) == 0
    monkeypatch.setenv("DSFER_THREADS", "zero")
    assert main(["synth", "--out", str(tmp_path / "t"), "--n", "1", "--size", "16"]) == 2


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_match_config_schema(name):
    jsonschema.validate(PRESETS[name]().to_dict(), schema("config"))
