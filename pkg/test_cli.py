#!/usr/bin/env python3
"""
Tests for the skelseg command line: the synth -> train -> segment -> eval ->
plot flow and the exit code of each failure family.
"""

import json

import pytest

from skelseg.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

TINY = {
    "epochs": 1,
    "batch_size": 3,
    "patch_size": 3,
    "encoder": {"stages": 1, "layers_per_stage": 2, "hidden": 6, "latent": 3},
    "temporal_decoder": {"hidden": [6, 3]},
}


@pytest.fixture
def corpus(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--classes", "3", "--sequences", "4", "--mean-segments", "3",
                 "--patch-size", "3", "--joints", "4", "--seed", "5"]) == EXIT_OK
    return data / "manifest.json"


def _config(tmp_path, **overrides):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({**TINY, **overrides}))
    return str(path)


def test_synth_prints_manifest(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--sequences", "2"]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("manifest.json")
    assert (tmp_path / "d" / "manifest.json").is_file()


def test_synth_needs_two_classes(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["synth", "--out", str(tmp_path), "--classes", "1"])
    assert info.value.code == EXIT_USAGE


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as info:
        main(["cluster"])
    assert info.value.code == EXIT_USAGE


def test_full_flow(tmp_path, corpus):
    ckpt = tmp_path / "model.ckpt"
    preds = tmp_path / "pred"
    report = tmp_path / "report.json"
    assert main(["train", "--config", _config(tmp_path), "--data", str(corpus), "--out", str(ckpt)]) == EXIT_OK
    assert ckpt.is_file()
    log = ckpt.with_suffix(".csv").read_text().splitlines()
    assert log[0] == "step,commit_z,commit_a,spatial,temporal,total"
    assert len(log) == 1 + 2

    assert main(["segment", "--ckpt", str(ckpt), "--data", str(corpus), "--out", str(preds)]) == EXIT_OK
    assert len(list(preds.glob("*.pred"))) == 4
    assert main(["eval", "--data", str(corpus), "--pred", str(preds), "--out", str(report)]) == EXIT_OK
    doc = json.loads(report.read_text())
    assert 0.0 <= doc["mof"] <= 100.0 and 0.0 <= doc["jsd"] <= 100.0
    assert main(["plot", "--data", str(corpus), "--pred", str(preds), "--out", str(tmp_path / "plots")]) == EXIT_OK
    assert (tmp_path / "plots" / "length_histogram.svg").is_file()


def test_resume_continues_and_checks_config(tmp_path, corpus):
    ckpt = tmp_path / "model.ckpt"
    config = _config(tmp_path)
    assert main(["train", "--config", config, "--data", str(corpus), "--out", str(ckpt)]) == EXIT_OK
    more = _config(tmp_path, epochs=2)
    assert main(["train", "--config", more, "--data", str(corpus), "--out", str(ckpt), "--resume", str(ckpt)]) \
        == EXIT_OK
    assert len(ckpt.with_suffix(".csv").read_text().splitlines()) == 1 + 2 * 2

    changed = _config(tmp_path, epochs=3, lr=1e-3)
    assert main(["train", "--config", changed, "--data", str(corpus), "--out", str(ckpt),
                 "--resume", str(ckpt)]) == EXIT_DATA


def test_unknown_config_key(tmp_path, corpus):
    config = _config(tmp_path, encoder={"depth": 2})
    assert main(["train", "--config", config, "--data", str(corpus), "--out", str(tmp_path / "m")]) == EXIT_DATA


def test_missing_prediction_file(tmp_path, corpus):
    preds = tmp_path / "pred"
    preds.mkdir()
    (preds / "seq_000.pred").write_text("0\n")
    assert main(["eval", "--data", str(corpus), "--pred", str(preds), "--out", str(tmp_path / "r.json")]) \
        == EXIT_DATA


def test_missing_checkpoint(tmp_path, corpus):
    assert main(["segment", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(corpus),
                 "--out", str(tmp_path / "p")]) == EXIT_DATA


def test_diverging_training_is_numeric_failure(tmp_path, corpus):
    config = _config(tmp_path, lr=1e200, epochs=3)
    assert main(["train", "--config", config, "--data", str(corpus), "--out", str(tmp_path / "m")]) \
        == EXIT_NUMERIC


def test_eval_accepts_huge_cluster_ids(tmp_path, corpus):
    preds = tmp_path / "pred"
    preds.mkdir()
    manifest = json.loads(corpus.read_text())
    for item in manifest["items"]:
        frames = len((corpus.parent / item["labels"]).read_text().split())
        (preds / (item["seq"].rsplit("/", 1)[-1].rsplit(".", 1)[0] + ".pred")).write_text("3000000000\n" * frames)
    assert main(["eval", "--data", str(corpus), "--pred", str(preds), "--out", str(tmp_path / "r.json")]) == EXIT_OK


def test_non_integer_manifest_field(tmp_path, corpus):
    doc = json.loads(corpus.read_text())
    doc["k_gt"] = "three"
    corpus.write_text(json.dumps(doc))
    assert main(["eval", "--data", str(corpus), "--pred", str(tmp_path), "--out", str(tmp_path / "r.json")]) \
        == EXIT_DATA
