import json

import numpy as np
import pytest

from tfanet.cli import dispatch, emit_heatmap
from tfanet.datakit import read_pnm
from tfanet.scorer import AnomalyMap, AnomalyResult

SYNTH = ["--n-train", "8", "--n-test-normal", "2", "--n-test-defect", "4"]
FAST = ["--epochs", "1", "--set", "train.batch_size=4"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert dispatch(["synth", "--seed", "7", "--out", str(d / "data")] + SYNTH) == 0
    assert dispatch(["train", "--data", str(d / "data"), "--preset", "desk",
                     "--out", str(d / "m.ckpt")] + FAST) == 0
    return d


def test_eval_writes_report(pipeline):
    out = pipeline / "eval"
    assert dispatch(["eval", "--data", str(pipeline / "data"), "--ckpt", str(pipeline / "m.ckpt"),
                     "--out", str(out), "--mode", "all"]) == 0
    rep = json.loads((out / "report_dual.json").read_text())
    assert rep["mode"] == "dual" and 0.0 <= rep["image_auroc"] <= 1.0
    assert {"euc", "cos"} <= {json.loads(p.read_text())["mode"] for p in out.glob("report_*.json")}
    assert (out / "run.json").exists() and (out / "table.csv").exists()
    assert (pipeline / "m.ckpt.run.json").exists()


def test_synth_records_run(pipeline):
    run = json.loads((pipeline / "data" / "run.json").read_text())
    assert run["command"] == "synth" and run["seed"] == 7


def test_infer_writes_heatmaps(pipeline):
    out = pipeline / "infer"
    args = ["infer", "--data", str(pipeline / "data" / "test" / "scratch"),
            "--ckpt", str(pipeline / "m.ckpt"), "--out", str(out)]
    assert dispatch(args) == 0
    img = read_pnm(out / "000.pgm")
    assert img.shape == (64, 64)
    lines = (out / "scores.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["sample"] == "000"
    assert dispatch(args) == 2
    assert dispatch(args + ["--force"]) == 0


def test_attn_writes_maps(pipeline):
    out = pipeline / "attn"
    assert dispatch(["attn", "--data", str(pipeline / "data" / "test" / "good"),
                     "--ckpt", str(pipeline / "m.ckpt"), "--out", str(out)]) == 0
    assert read_pnm(out / "000.attn.pgm").shape == (8, 8)


def test_ablate_variant_axis(pipeline):
    out = pipeline / "ablate"
    assert dispatch(["ablate", "--axis", "variant", "--data", str(pipeline / "data"),
                     "--out", str(out)] + FAST) == 0
    summary = json.loads((out / "ablation_variant.json").read_text())["summary"]
    assert set(summary["keys"]) == {"vanilla", "a", "b", "c"}


def test_unknown_flag_is_usage_error(capsys):
    assert dispatch(["train", "--data", "x", "--out", "y", "--bogus-flag"]) == 1
    assert "--bogus-flag" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    assert dispatch(["train", "--data", "x", "--out", str(tmp_path / "m"), "--set", "train.nope=1"]) == 1
    assert "train.nope" in capsys.readouterr().err


def test_missing_data_is_exit_2(tmp_path):
    assert dispatch(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m")]) == 2


def test_corrupt_checkpoint_is_exit_2(pipeline, tmp_path):
    bad = tmp_path / "bad.ckpt"
    buf = bytearray((pipeline / "m.ckpt").read_bytes())
    buf[100] ^= 0xFF
    bad.write_bytes(bytes(buf))
    assert dispatch(["eval", "--data", str(pipeline / "data"), "--ckpt", str(bad),
                     "--out", str(tmp_path / "e")]) == 2


def _result(final):
    m = AnomalyMap(final, "smoothed")
    return AnomalyResult(m, AnomalyMap(final, "upsampled"), AnomalyMap(final, "upsampled"), 0.0)


def test_constant_map_heatmap_is_zero(tmp_path):
    emit_heatmap(_result(np.full((6, 6), 3.0)), tmp_path, "flat")
    assert np.all(read_pnm(tmp_path / "flat.pgm") == 0)


def test_heatmap_scaling_and_force(tmp_path):
    m = np.linspace(0, 1, 16).reshape(4, 4)
    emit_heatmap(_result(m), tmp_path, "ramp")
    img = read_pnm(tmp_path / "ramp.pgm")
    assert img.min() == 0 and img.max() == 255
    with pytest.raises(FileExistsError):
        emit_heatmap(_result(m), tmp_path, "ramp")
    emit_heatmap(_result(m), tmp_path, "ramp", force=True)
    assert len((tmp_path / "scores.jsonl").read_text().splitlines()) == 2
