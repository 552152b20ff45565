import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from hiercap.cli import cli_main
from hiercap.decoder import count_parameters
from hiercap.encoder import parameter_shapes
from hiercap.interpretability import select_pairs
from hiercap.model import paper_scale_config


def _run(capsys, *argv):
    code = cli_main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_unknown_subcommand(capsys, tmp_path):
    code, _, err = _run(capsys, "frobnicate", "--out", str(tmp_path / "o"))
    assert code != 0 and "usage:" in err
    assert not (tmp_path / "o").exists()


def test_unknown_flag(capsys, tmp_path):
    code, _, err = _run(capsys, "params", "--bogus", "--out", str(tmp_path / "o"))
    assert code != 0 and "usage:" in err


def test_no_subcommand(capsys):
    code, _, err = _run(capsys)
    assert code != 0 and "usage:" in err


def test_console_entry_point_exit_code(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hiercap", "nope"], capture_output=True, text=True, cwd=tmp_path)
    assert res.returncode == 2 and "usage:" in res.stderr


def test_error_path_writes_nothing(capsys, tmp_path):
    out = tmp_path / "o"
    code, _, err = _run(capsys, "train", "--data", str(tmp_path / "missing"), "--out", str(out))
    assert code == 1 and "not found" in err
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []


def test_error_keeps_existing_out_untouched(capsys, tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    code, _, _ = _run(capsys, "eval", "--ckpt", str(tmp_path / "nope.hck"), "--data", str(tmp_path), "--out", str(out))
    assert code == 1
    assert [p.name for p in out.iterdir()] == ["keep.txt"]


def test_bad_config_key(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"not_a_key": 1}))
    code, _, err = _run(capsys, "params", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 1 and "not_a_key" in err


def test_params_paper_scale(capsys, tmp_path):
    code, out, _ = _run(capsys, "params", "--paper-scale", "--out", str(tmp_path / "o"))
    assert code == 0
    rep = json.loads(out)
    cfg = paper_scale_config(9489)
    want_enc = sum(int(np.prod(s)) for s in parameter_shapes(cfg.encoder, project=False).values())
    assert rep["vocab_size"] == 9489
    assert rep["decoder"] == count_parameters(cfg.decoder)
    assert rep["encoder"] == want_enc
    assert rep["total"] == rep["encoder"] + rep["decoder"]
    assert cfg.decoder.visual_channels == 2048 and cfg.decoder.embed_dim == 300 and cfg.decoder.gate_hidden == 512
    assert json.loads((tmp_path / "o" / "params.json").read_text())["total"] == rep["total"]


def test_config_flags_override_file(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"embed_dim": 12}))
    code, out, _ = _run(capsys, "params", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 0
    full = json.loads((tmp_path / "o" / "params.json").read_text())
    assert full["config"]["decoder"]["embed_dim"] == 12


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "out"
    steps = [
        ["gen-data", "--count", "16", "--heldout", "4", "--out", str(data)],
        ["train-rwa", "--data", str(data), "--epochs", "2", "--out", str(out)],
        ["train", "--data", str(data), "--epochs", "1", "--out", str(out)],
        ["retrain-ie", "--data", str(data), "--ckpt", str(out / "captioner.hck"), "--rwa", str(out / "rwa.hck"),
         "--epochs", "1", "--out", str(out)],
        ["caption", "--ckpt", str(out / "captioner_ie.hck"), "--data", str(data), "--limit", "2", "--out", str(out)],
        ["explain", "--ckpt", str(out / "captioner_ie.hck"), "--rwa", str(out / "rwa.hck"), "--data", str(data),
         "--split", "train", "--index", "0", "--out", str(out)],
        ["eval", "--ckpt", str(out / "captioner_ie.hck"), "--data", str(data), "--out", str(out)],
        ["bench", "--ckpt", str(out / "captioner.hck"), "--T", "8", "--reps", "1", "--out", str(out)],
    ]
    codes = [cli_main(s) for s in steps]
    return data, out, codes


def test_smoke_pipeline_exit_codes(pipeline):
    assert pipeline[2] == [0] * 8


def test_smoke_pipeline_outputs(pipeline):
    data, out, _ = pipeline
    for name in ("train.jsonl", "heldout.jsonl", "vocab.json"):
        assert (data / name).is_file()
    assert len((data / "train.jsonl").read_text().splitlines()) == 16
    for name in ("rwa.hck", "captioner.hck", "captioner_ie.hck", "rwa_curve.csv", "phase1_curve.svg",
                 "phase2_curve.csv", "ie_summary.json", "captions.json", "metrics.json", "bench.json"):
        assert (out / name).is_file(), name
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["count"] == 4 and 0.0 <= metrics["bleu1"] <= 1.0
    assert len(json.loads((out / "captions.json").read_text())) == 2
    assert not [p for p in out.parent.iterdir() if p.name.startswith(".hiercap-")]


def test_smoke_explanation_matches_selection(pipeline):
    _, out, _ = pipeline
    info = json.loads((out / "explanation.json").read_text())
    root = ET.fromstring((out / "explanation.svg").read_bytes())
    drawn = {(int(r.get("data-region")), int(r.get("data-word")))
             for r in root.iter("{http://www.w3.org/2000/svg}rect") if r.get("class") == "pair-box"}
    assert drawn == select_pairs(info["matrix"], info["threshold_factor"]).indices()
