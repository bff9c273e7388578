import subprocess
import sys
from pathlib import Path

import pytest

from prednet import harness as H
from prednet.cli import main

CONFIG = """
[experiment]
seed = 3
[model]
num_layers = 3
a_channels = 1, 2, 4
r_channels = 2, 4, 4
input_size = 16, 16
{classifier}
[optimizer]
epochs = 1
batch_size = 4
[data]
train = data/train.vseq
val = data/val.vseq
test = data/test.vseq
num_train = 8
num_val = 4
num_test = 4
seq_len = 6
canvas = 16, 16
glyph_size = 6
num_shapes = 3
[eval]
n = 2
"""

CLASSIFIER = """[classifier]
encoder_channels = 3, 3
decoder_channels = 3
feedback_channels = 2
group_map = axis"""


@pytest.fixture(params=["prednet", "prednet_plus"])
def workdir(tmp_path, request):
    text = CONFIG.format(classifier=CLASSIFIER if request.param == "prednet_plus" else "")
    (tmp_path / "exp.ini").write_text(text)
    return tmp_path


def run(workdir, *args):
    return main([args[0], "--config", str(workdir / "exp.ini"), *args[1:]])


def test_full_pipeline(workdir, capsys):
    data, out = workdir / "data", workdir / "run"
    assert run(workdir, "datagen", "--out", str(data)) == 0
    assert {p.name for p in data.iterdir()} == {"train.vseq", "val.vseq", "test.vseq", "class_balance.csv"}
    assert run(workdir, "train", "--out", str(out)) == 0
    assert (out / "model.pnck").exists() and (out / "train_log.csv").exists()
    assert run(workdir, "eval", "--out", str(out)) == 0
    assert (out / "metrics.csv").exists()
    assert run(workdir, "extrapolate", "--out", str(out), "--t-start", "2", "--t-start", "4") == 0
    assert (out / "extrapolation_tstart02.csv").exists() and (out / "extrapolation_tstart04.csv").exists()
    assert (out / "frames" / "seq000_tstart04_t05_extrapolated.pgm").exists()
    assert run(workdir, "probe", "--out", str(out / "probe"), "--checkpoint", str(out / "model.pnck")) == 0
    assert (out / "probe" / "probe_trace.csv").read_text().count("\n") == 1 + 6 * 3
    assert "mae" in capsys.readouterr().out


def test_classification_csv_only_for_plus(workdir):
    data, out = workdir / "data", workdir / "run"
    run(workdir, "datagen", "--out", str(data))
    run(workdir, "train", "--out", str(out))
    run(workdir, "eval", "--out", str(out))
    has_head = "[classifier]" in (workdir / "exp.ini").read_text()
    assert (out / "classification.csv").exists() == has_head


def test_seed_override_changes_data(workdir):
    run(workdir, "datagen", "--out", str(workdir / "a"))
    run(workdir, "datagen", "--out", str(workdir / "b"), "--seed", "99")
    assert (workdir / "a" / "train.vseq").read_bytes() != (workdir / "b" / "train.vseq").read_bytes()


def test_error_exit_codes(workdir, capsys):
    assert run(workdir, "train", "--out", str(workdir / "run")) == 2  # datasets not generated yet
    assert main(["datagen", "--config", str(workdir / "missing.ini"), "--out", str(workdir)]) == 2
    run(workdir, "datagen", "--out", str(workdir / "data"))
    assert run(workdir, "eval", "--out", str(workdir / "run")) == 2  # no checkpoint
    (workdir / "junk.pnck").write_bytes(b"junk")
    assert run(workdir, "eval", "--out", str(workdir / "run"), "--checkpoint", str(workdir / "junk.pnck")) == 2
    run(workdir, "train", "--out", str(workdir / "run"))
    assert run(workdir, "extrapolate", "--out", str(workdir / "run"), "--t-start", "1") == 2
    assert run(workdir, "probe", "--out", str(workdir / "run"), "--index", "99") == 2
    (workdir / "bad.ini").write_text("[model]\nnum_layers = two\n")
    assert main(["datagen", "--config", str(workdir / "bad.ini"), "--out", str(workdir)]) == 2
    assert "error:" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "prednet.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "datagen" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "prednet.cli", "train", "--config", str(tmp_path / "x.ini"), "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2


@pytest.mark.parametrize("name", ["prednet", "prednet_plus"])
def test_shipped_configs_parse(name):
    path = Path(__file__).resolve().parents[1] / "configs" / f"{name}.ini"
    cfg = H.ExperimentConfig.from_ini(path)
    assert (cfg.classifier is not None) == (name == "prednet_plus")
    assert cfg.dataset_path("train").resolve() == (path.parents[1] / "data" / "train.vseq").resolve()
