import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mxtrain import container
from mxtrain.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from mxtrain.mx_linear import dequantize_matrix

DATA = Path(__file__).parent / "data"

SMALL_CFG = """
[run]
seed = 1
steps = 8
batch_size = 16
warmup_steps = 2
log_every = 4

[model]
depth = 1
width = 32
heads = 2
mlp_ratio = 2
tokens = 4

[data]
classes = 4
dim = 32
n_train = 256
n_val = 64

[diagnostics]
enabled = true
window = 3
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL_CFG)
    return p


def _json_lines(text):
    return [json.loads(l) for l in text.splitlines() if l.strip()]


def test_quantize_matches_golden(tmp_path, capsys):
    src = DATA / "golden_input.npy"
    out = tmp_path / "row.mxt1"
    assert main(["quantize", str(src), str(out)]) == EXIT_OK
    assert out.read_bytes() == (DATA / "golden_row_tf_det.mxt1").read_bytes()
    out = tmp_path / "col.mxt1"
    args = ["quantize", str(src), str(out), "--axis", "col", "--rounding", "stochastic", "--seed", "7"]
    assert main(args) == EXIT_OK
    assert out.read_bytes() == (DATA / "golden_col_tf_sr_seed7.mxt1").read_bytes()
    summary = _json_lines(capsys.readouterr().out)[-1]
    assert summary["verb"] == "quantize" and summary["shape"] == [37, 45]


def test_quantize_reverse_direction(tmp_path):
    out = tmp_path / "back.npy"
    assert main(["quantize", str(DATA / "golden_row_tf_det.mxt1"), str(out)]) == EXIT_OK
    want = dequantize_matrix(container.load(DATA / "golden_row_tf_det.mxt1"))
    np.testing.assert_array_equal(np.load(out), want)


def test_quantize_errors(tmp_path, capsys):
    src = DATA / "golden_input.npy"
    assert main(["quantize", str(src), str(tmp_path / "x"), "--rounding", "stochastic"]) == EXIT_CONFIG
    assert "seed" in capsys.readouterr().err
    bad = tmp_path / "bad.mxt1"
    bad.write_bytes(b"MXT1" + b"\0" * 3)
    assert main(["quantize", str(bad), str(tmp_path / "y.npy")]) == EXIT_CONFIG
    assert main(["quantize", str(tmp_path / "missing.npy"), str(tmp_path / "z")]) == EXIT_CONFIG
    np.save(tmp_path / "cube.npy", np.zeros((2, 2, 2)))
    assert main(["quantize", str(tmp_path / "cube.npy"), str(tmp_path / "z")]) == EXIT_CONFIG
    assert main(["quantize", str(src), str(tmp_path / "z"), "--rule", "banana"]) == EXIT_CONFIG


def test_train_and_diagnose(tmp_path, small_cfg, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(small_cfg), "--out", str(out)]) == EXIT_OK
    summary = _json_lines(capsys.readouterr().out)[-1]
    assert summary["steps"] == 8 and 0.0 <= summary["val_acc"] <= 1.0
    assert "r_wq" in summary["diagnostics"]
    assert (out / "metrics.jsonl").exists() and (out / "final.ckpt").exists()

    log = tmp_path / "diag.jsonl"
    assert main(["diagnose", "--checkpoint", str(out / "final.ckpt"), "--window", "3", "--log", str(log)]) == EXIT_OK
    recs = _json_lines(capsys.readouterr().out)
    metrics = {r["metric"] for r in recs}
    assert {"r_w", "r_wq", "r_y", "oscillating_fraction", "confidence"} <= metrics
    assert all(r["step"] == 11 for r in recs)
    assert _json_lines(log.read_text())[-1] == recs[-1]


def test_train_is_reproducible(tmp_path, small_cfg, capsys):
    for name in ("a", "b"):
        assert main(["train", "--config", str(small_cfg), "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_train_config_errors(tmp_path, capsys):
    p = tmp_path / "noseed.cfg"
    p.write_text(SMALL_CFG.replace("seed = 1\n", ""))
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG
    assert "run.seed" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    p.write_text(SMALL_CFG + "\n[optimizer]\nname = qramping\n[quantizer]\nweight = qema\n")
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG
    assert main(["diagnose", "--checkpoint", str(p), "--window", "2"]) == EXIT_CONFIG
    assert main(["train"]) == EXIT_CONFIG


def test_numeric_abort_exit_code(tmp_path, capsys):
    p = tmp_path / "hot.cfg"
    p.write_text(SMALL_CFG.replace("[run]\n", "[run]\nlr = 1e30\nweight_decay = 0\n"))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "hot")]) == EXIT_NUMERIC
    assert "numeric abort" in capsys.readouterr().err
    assert (tmp_path / "hot" / "abort_snapshot.json").exists()


def test_print_defaults_round_trips(capsys):
    from mxtrain.harness import TrainConfig, loads_config

    assert main(["train", "--print-defaults"]) == EXIT_OK
    assert loads_config(capsys.readouterr().out) == TrainConfig()


def test_ablate_and_impact(tmp_path, small_cfg, capsys):
    out = tmp_path / "grid"
    args = ["ablate", "--grid", "rounding=deterministic,stochastic", "--config", str(small_cfg),
            "--steps", "2", "--seeds", "0,1", "--out", str(out)]
    assert main(args) == EXIT_OK
    result = json.loads((out / "ablation_grid.json").read_text())
    assert len(result["rows"]) == 2 and result["rows"][0]["seeds"] == [0, 1]
    assert "mean_acc" in capsys.readouterr().out
    assert main(["ablate", "--grid", "speed=fast"]) == EXIT_CONFIG

    out = tmp_path / "impact"
    assert main(["impact", "--config", str(small_cfg), "--steps", "2", "--out", str(out)]) == EXIT_OK
    rows = json.loads((out / "quantizer_impact.json").read_text())["rows"]
    assert [r["mask"] for r in rows] == ["none", "1", "2", "3", "4", "5", "6", "all"]


def test_bundled_grid_file_and_config_names(capsys):
    assert main(["ablate", "--grid", "grid_formats.txt", "--config", "tetrajet.cfg", "--steps", "1"]) == EXIT_OK


def test_module_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "mxtrain", "quantize", str(DATA / "golden_input.npy"), str(tmp_path / "o.mxt1")],
        capture_output=True, text=True,
    )
    assert out.returncode == 0
    assert (tmp_path / "o.mxt1").read_bytes() == (DATA / "golden_row_tf_det.mxt1").read_bytes()
    out = subprocess.run([sys.executable, "-m", "mxtrain", "train", "--config", "nope.cfg"], capture_output=True)
    assert out.returncode == 2
