import json
import shutil

import numpy as np
import pytest

from fosp import pngio
from fosp.cli import main

SMALL = [
    "--set", "model.channels=16,12,8,4",
    "--set", "model.fuse_channels=8",
    "--set", "model.inpainter_width=4",
    "--set", "inpainter.steps=2",
    "--set", "inpainter.train_images=8",
    "--set", "data.image_size=64",
    "--set", "batch_size=2",
]


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenerate:
    def test_same_seed_same_bytes(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path / "a"), "--n", "6", "--seed", "1"]) == 0
        assert main(["generate", "--out", str(tmp_path / "b"), "--n", "6", "--seed", "1"]) == 0
        assert _tree(tmp_path / "a") == _tree(tmp_path / "b")

    def test_zero_samples_is_validation_error(self, tmp_path, capsys):
        assert main(["generate", "--out", str(tmp_path), "--n", "0"]) == 2
        err = _error(capsys)
        assert err["exit"] == 2 and "positive" in err["message"]

    def test_quota_counts(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--n", "100", "--quota", "0.6,0.3,0.1", "--size", "64"]) == 0
        records = pngio.read_jsonl(tmp_path / "train" / "index.jsonl")
        assert [sum(r["bucket"] == b for r in records) for b in ("Small", "Medium", "Large")] == [60, 30, 10]

    def test_bad_quota(self, tmp_path, capsys):
        assert main(["generate", "--out", str(tmp_path), "--n", "3", "--quota", "0.5,0.5"]) == 2
        assert _error(capsys)["error"] == "UsageError"


def test_unknown_key_lists_valid_keys(tmp_path, capsys, small_data):
    code = main(["train", "--out", str(tmp_path), "--data", str(small_data), "--set", "model.colour=red"])
    assert code == 2
    err = _error(capsys)
    assert err["error"] == "ConfigError"
    assert "model.channels" in err["message"] and "eval.threshold" in err["message"]


def test_unknown_subcommand(capsys):
    assert main(["fly"]) == 2
    assert _error(capsys)["exit"] == 2


def test_runtime_failure_exit_code(tmp_path, capsys, monkeypatch, small_data):
    from fosp import cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--out", str(tmp_path), "--data", str(small_data)]) == 3
    assert _error(capsys) == {"error": "RuntimeError", "exit": 3, "message": "disk on fire"}


@pytest.fixture(scope="module")
def trained(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    code = main(["train", "--out", str(out), "--data", str(small_data), "--iterations", "2", *SMALL])
    assert code == 0
    return out


def test_train_writes_run_files(trained):
    assert {"checkpoint.pt", "train_log.jsonl", "config.yaml"} <= {p.name for p in trained.iterdir()}


def test_train_zero_iterations_equals_init(tmp_path, small_data):
    from fosp.trainer import Checkpoint, build_model

    assert main(["train", "--out", str(tmp_path), "--data", str(small_data), "--iterations", "0", *SMALL]) == 0
    ckpt = Checkpoint.load(tmp_path / "checkpoint.pt")
    init = build_model(ckpt.config).state_dict()
    assert all((init[k] == v).all() for k, v in ckpt.model_state.items())


def test_eval_checkpoint_writes_report(trained, small_data, tmp_path, capsys):
    out = tmp_path / "eval"
    # the run also overrode iterations, so the eval config hashes differently
    with pytest.warns(UserWarning, match="config hash"):
        code = main(["eval", "--out", str(out), "--data", str(small_data), "--checkpoint", str(trained / "checkpoint.pt"), *SMALL])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["counts"]["Total"] == 20 and report["m_definition"] == "MSE"
    assert "Small" in capsys.readouterr().out


def test_eval_perfect_predictions(small_data, tmp_path):
    preds = tmp_path / "preds"
    for mask in sorted((small_data / "test" / "masks").glob("*.png")):
        preds.mkdir(exist_ok=True)
        shutil.copy(mask, preds / mask.name)
    out = tmp_path / "eval"
    assert main(["eval", "--out", str(out), "--data", str(small_data), "--predictions", str(preds)]) == 0
    total = json.loads((out / "report.json").read_text())["rows"]["Total"]
    assert total["fbeta"] == 1.0 and total["m"] == 0.0


def test_eval_missing_checkpoint(small_data, tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path), "--data", str(small_data), "--checkpoint", str(tmp_path / "nope.pt")]) == 2
    assert "checkpoint" in _error(capsys)["message"]


def test_eval_needs_one_source(small_data, tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path), "--data", str(small_data)]) == 2


def test_separate_panels(trained, small_data, tmp_path):
    image = small_data / "test" / "images" / "00000.png"
    mask = small_data / "test" / "masks" / "00000.png"
    args = ["separate", "--checkpoint", str(trained / "checkpoint.pt"), "--images", str(image), "--masks", str(mask), "--oracle"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    panel = tmp_path / "a" / "00000"
    names = sorted(p.name for p in panel.iterdir())
    assert names == [
        "background_oracle.png", "ff_level1.png", "ff_level2.png", "ff_level3.png", "ff_level4.png",
        "fm_overlay.png", "prediction.png",
    ]
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    overlay = pngio.read_rgb(panel / "fm_overlay.png")
    gt = pngio.read_mask(mask).astype(bool)
    assert (overlay[gt, 0] == 1.0).all()


def test_separate_missing_checkpoint(tmp_path, capsys):
    assert main(["separate", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "x.pt"), "--images", "a.png"]) == 2


def test_ablate_two_rows(small_data, tmp_path, capsys):
    assert main(["ablate", "--out", str(tmp_path), "--data", str(small_data), "--rows", "a,e", "--iterations", "1", *SMALL]) == 0
    table = (tmp_path / "ablation.txt").read_text().splitlines()
    assert len(table) == 3 and table[1].startswith("(a)") and table[2].startswith("(e)")
    assert set(json.loads((tmp_path / "ablation.json").read_text())) == {"a", "e"}


def test_report_histogram_and_table(small_data, tmp_path):
    from fosp.metrics import evaluate

    rng = np.random.default_rng(0)
    rep = evaluate([(rng.random((8, 8)), rng.random((8, 8)) > 0.5, d) for d in (0.001, 0.01, 0.1)])
    (tmp_path / "r.json").write_text(json.dumps(rep.to_dict()))
    out = tmp_path / "out"
    assert main(["report", "--out", str(out), "--data", str(small_data), "--report", str(tmp_path / "r.json")]) == 0
    hist = json.loads((out / "delta_histogram.json").read_text())
    assert sum(hist["counts"]) == hist["samples"] == 60
    assert 0.005 in hist["edges"] and 0.025 in hist["edges"]
    header = (out / "metrics_table.txt").read_text().splitlines()[0]
    assert [h.strip() for h in header.strip("|").split("|")] == ["Total", "Small", "Medium", "Large"]
    first = (out / "delta_histogram.png").read_bytes()
    assert first[:8] == b"\x89PNG\r\n\x1a\n"
    main(["report", "--out", str(out), "--data", str(small_data)])
    assert (out / "delta_histogram.png").read_bytes() == first
