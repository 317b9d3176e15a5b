#
# python-spad: structured pruning adapters.
#
# This program is free software: you can redistribute it and/or modify it under
# the terms of the GNU Lesser General Public License as published by the Free
# Software Foundation, either version 3 of the License, or (at your option) any
# later version.
#
# This program is distributed in the hope that it will be useful, but WITHOUT
# ANY WARRANTY; without even the implied warranty of MERCHANTABILITY or FITNESS
# FOR A PARTICULAR PURPOSE.  See the GNU Lesser General Public License for more
# details.
#
# You should have received a copy of the GNU General Public License along with
# this program.  If not, see <http://www.gnu.org/licenses/>.
#

import os

import numpy as np
import pytest

from . import data, delta
from .cli import BASE_FILE, METRICS_COLUMNS, METRICS_FILE, checkpoint_name, main

DATASET = "blobs:seed=3,train=64,test=32"

RUN_TEXT = """
manifest: mlp
dataset: %s
mode: splora
rank: 8
criterion: taylor
seed: 11
warmup_epochs: 1
epochs_per_step: 1
batch_size: 32
base_batch_size: 32
lr: 0.05
scoring_samples: 32
""" % DATASET


def _write(path, text):
    with open(str(path), "w") as f:
        f.write(text)
    return str(path)


def _train(tmp, name):
    config = _write(tmp / (name + ".conf"), RUN_TEXT)
    out = str(tmp / name)
    assert main(["train", "--config", config, "--density", "0.3", "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    return _train(tmp_path_factory.mktemp("train"), "run")


def _metrics(out):
    with open(os.path.join(out, METRICS_FILE)) as f:
        return f.read().splitlines()


def test_train_artifacts(run_dir):
    names = sorted(os.listdir(run_dir))
    densities = ["%.2f" % (1 - 0.05 * k) for k in range(1, 15)]
    assert names == sorted([BASE_FILE, METRICS_FILE] +
                           [checkpoint_name(float(d)) for d in densities])
    assert checkpoint_name(0.3) == "density-0.30.spad"

    lines = _metrics(run_dir)
    assert lines[0].split("\t") == list(METRICS_COLUMNS)
    rows = [line.split("\t") for line in lines[1:]]
    assert len(rows) == 15
    assert [int(r[0]) for r in rows] == list(range(15))
    channel_density = [float(r[1]) for r in rows]
    assert channel_density[0] == 1.0 and abs(channel_density[-1] - 0.3) < 0.01
    assert all(a > b for a, b in zip(channel_density, channel_density[1:]))
    assert all(0 <= float(r[6]) <= 1 for r in rows)


def test_train_is_deterministic(run_dir, tmp_path):
    again = _train(tmp_path, "again")
    assert _metrics(again) == _metrics(run_dir)
    for name in (BASE_FILE, checkpoint_name(0.3)):
        with open(os.path.join(run_dir, name), "rb") as a, \
                open(os.path.join(again, name), "rb") as b:
            assert a.read() == b.read()


def test_train_rejects_bad_configs(tmp_path, capsys):
    bad = _write(tmp_path / "bad.manifest",
                 "name: bad\ninput_shape: 16\nnum_classes: 10\nlayers:\n"
                 "    fc1(16/64)<linear> +adapt +prune\n    head(32/10)<head>\n")
    config = _write(tmp_path / "bad.conf", RUN_TEXT.replace("manifest: mlp",
                                                           "manifest: " + bad))
    assert main(["train", "--config", config, "--out", str(tmp_path / "x")]) == 2
    assert "bad.manifest" in capsys.readouterr().err
    assert not os.path.exists(str(tmp_path / "x"))

    config = _write(tmp_path / "noseed.conf", RUN_TEXT.replace("seed: 11\n", ""))
    assert main(["train", "--config", config]) == 2
    assert "seed is mandatory" in capsys.readouterr().err

    config = _write(tmp_path / "step.conf", RUN_TEXT + "density_step: 0.04\n")
    assert main(["train", "--config", config]) == 2


def test_report(capsys):
    assert main(["report", "resnet50"]) == 0
    assert "dParams 23,520.8K" in capsys.readouterr().out
    assert main(["report", "resnet50", "--mode", "splora", "--rank", "32"]) == 0
    out = capsys.readouterr().out
    assert "splora(r=32)" in out and "fewer)" in out
    assert main(["report", "resnet50", "--mode", "lora", "--density", "0.5"]) == 2
    assert main(["report", "no-such-net"]) == 2


def test_curve(tmp_path, capsys):
    out = str(tmp_path / "curve.csv")
    assert main(["curve", "768", "3072", "32", "--densities", "1.0,0.5", "--out", out]) == 0
    with open(out) as f:
        lines = f.read().splitlines()
    assert len(lines) == 7
    assert "splora,1.0000,0.05208" in lines
    assert "finetune,0.5000,0.50000" in lines
    assert main(["curve", "768", "3072", "0"]) == 2
    assert main(["curve", "4", "4", "2", "--densities", "1.0"]) == 0
    assert capsys.readouterr().out.startswith("method,density,learned_fraction")


def test_fuse(run_dir, tmp_path):
    base_path = os.path.join(run_dir, BASE_FILE)
    task_path = os.path.join(run_dir, checkpoint_name(0.3))
    out = str(tmp_path / "fused.spad")
    assert main(["fuse", base_path, task_path, "--out", out]) == 0

    fused = delta.load_checkpoint(out)
    assert fused.method == "finetune" and not fused.ranks()
    assert fused.manifest.name == "mlp-fused"
    masked = delta.load_delta(delta.load_checkpoint(base_path), task_path)
    _, test = data.for_spec(DATASET)
    assert np.array_equal(fused.predict(test.x), masked.predict(test.x))
    assert fused.evaluate(test) == masked.evaluate(test)


def test_switch(run_dir, capsys):
    base_path = os.path.join(run_dir, BASE_FILE)
    paths = [os.path.join(run_dir, checkpoint_name(d)) for d in (0.95, 0.3, 0.95)]
    assert main(["switch", base_path] + paths + ["--dataset", DATASET]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[0] for line in lines] == paths
    assert lines[0].split("\t")[1] == lines[2].split("\t")[1]


def test_spad_errors(run_dir, tmp_path):
    junk = _write(tmp_path / "junk.spad", "not a spad file at all")
    base_path = os.path.join(run_dir, BASE_FILE)
    assert main(["fuse", junk, "--out", str(tmp_path / "f.spad")]) == 3
    assert main(["switch", base_path, junk, "--dataset", DATASET]) == 3
    with open(os.path.join(run_dir, checkpoint_name(0.5)), "rb") as f:
        cut = f.read()[:100]
    with open(str(tmp_path / "cut.spad"), "wb") as f:
        f.write(cut)
    assert main(["switch", base_path, str(tmp_path / "cut.spad"),
                 "--dataset", DATASET]) == 5


def test_missing_files_are_validation_errors(run_dir, tmp_path, capsys):
    missing = str(tmp_path / "nowhere.conf")
    assert main(["train", "--config", missing, "--seed", "1"]) == 2
    assert "config file does not exist" in capsys.readouterr().err

    base_path = os.path.join(run_dir, BASE_FILE)
    gone = str(tmp_path / "gone.spad")
    assert main(["fuse", gone, "--out", str(tmp_path / "f.spad")]) == 2
    assert main(["fuse", base_path, gone, "--out", str(tmp_path / "f.spad")]) == 2
    assert main(["switch", base_path, gone, "--dataset", DATASET]) == 2
    assert "gone.spad" in capsys.readouterr().err
