import json
import os

import pytest
from PIL import Image

from checkpoint import file_hash, load_checkpoint
from keyreid import main

TINY_TOML = """
[data]
height = 64
width = 32

[backbone]
D = 8
layers = 1
heads = 2
T = 2
patch = 16
stride = 16

[tcss]
shift = 3
groups = 2

[train]
epochs = 1
batch = 8
P_ids = 4
K_instances = 2
warmup_epochs = 0
T = 2
steps_per_epoch = 1
eval_interval = 1
base_lr = 0.01

[eval]
max_rank = 4
batch_size = 8
"""


@pytest.fixture
def tiny_toml(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return str(path)


@pytest.fixture
def trained(synth_root, tiny_toml, tmp_path):
    root, _ = synth_root
    run = str(tmp_path / "run")
    assert main(["train", "--config", tiny_toml, "--data", root, "--out", run]) == 0
    return root, run


def _tree_hashes(root):
    hashes = {}
    for directory, _, files in os.walk(root):
        for name in files:
            path = os.path.join(directory, name)
            hashes[os.path.relpath(path, root)] = file_hash(path)
    return hashes


def test_synth_data_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth-data", "--ids", "2", "--cams", "2", "--frames", "3", "--seed", "4",
                     "--out", str(tmp_path / name)]) == 0
    first, second = _tree_hashes(tmp_path / "a"), _tree_hashes(tmp_path / "b")
    first.pop("keyreid.log")
    second.pop("keyreid.log")
    assert first == second
    assert "manifest.tsv" in first


def test_usage_errors_exit_with_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["synth-data", "--ids", "0", "--out", str(tmp_path)])
    assert excinfo.value.code == 1
    with pytest.raises(SystemExit) as excinfo:
        main(["train", "--data", str(tmp_path)])
    assert excinfo.value.code == 1


def test_configuration_errors_exit_with_one(synth_root, tmp_path):
    root, _ = synth_root
    assert main(["train", "--data", root, "--out", str(tmp_path / "r"), "--train.batch", "30"]) == 1
    assert main(["train", "--data", root, "--out", str(tmp_path / "r"), "--config", str(tmp_path / "no.toml")]) == 1


def test_runtime_errors_exit_with_two(tmp_path, tiny_toml):
    assert main(["train", "--config", tiny_toml, "--data", str(tmp_path / "missing"), "--out",
                 str(tmp_path / "r")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "ev")]) == 2


def test_train_help_lists_config_fields(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["train", "--help"])
    assert excinfo.value.code == 0
    out = capsys.readouterr().out
    assert "--backbone.D" in out and "--tcss.shift" in out and "--ablate" in out


def test_eval_with_and_without_gallery_file(trained, tmp_path, capsys):
    root, run = trained
    checkpoint = os.path.join(run, "last.ckpt")
    gallery = str(tmp_path / "gallery.bin")
    assert main(["eval", "--checkpoint", checkpoint, "--data", root, "--out", str(tmp_path / "direct")]) == 0
    assert "Rank-1" in capsys.readouterr().out
    assert main(["embed", "--checkpoint", checkpoint, "--data", root, "--split", "gallery", "--out", gallery]) == 0
    assert main(["eval", "--checkpoint", checkpoint, "--data", root, "--gallery", gallery,
                 "--out", str(tmp_path / "from_file")]) == 0
    with open(tmp_path / "direct" / "metrics.json", encoding="utf-8") as f:
        direct = json.load(f)
    with open(tmp_path / "from_file" / "metrics.json", encoding="utf-8") as f:
        from_file = json.load(f)
    assert direct == from_file
    assert direct["num_valid_queries"] == 4 and len(direct["cmc"]) == 4


def test_eval_dumps(trained, tmp_path):
    root, run = trained
    out = tmp_path / "dumps"
    assert main(["eval", "--checkpoint", os.path.join(run, "last.ckpt"), "--data", root, "--out", str(out),
                 "--dump-ranking", "q0", "--top", "3", "--dump-attention", "p0000_c0_t1"]) == 0
    assert (out / "ranking_p0000_c0_t1.png").exists()
    with open(out / "attention_p0000_c0_t1" / "attention.json", encoding="utf-8") as f:
        record = json.load(f)
    assert len(record["alpha"]) == 2 and abs(sum(record["alpha"]) - 1.0) < 1e-9
    assert (out / "attention_p0000_c0_t1" / "heatmaps" / "patches_head.png").exists()
    assert main(["eval", "--checkpoint", os.path.join(run, "last.ckpt"), "--data", root, "--out", str(out),
                 "--dump-ranking", "q99"]) == 2


def test_embed_empty_split(tmp_path, tiny_toml):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["synth-data", "--ids", "4", "--cams", "2", "--tracklets", "1", "--frames", "2",
                 "--out", str(data)]) == 0
    assert main(["train", "--config", tiny_toml, "--data", str(data), "--out", str(run)]) == 0
    assert main(["embed", "--checkpoint", str(run / "last.ckpt"), "--data", str(data), "--split", "query",
                 "--out", str(tmp_path / "q.bin")]) == 2
    assert not (tmp_path / "q.bin").exists()


def test_identical_runs_write_identical_checkpoints(synth_root, tiny_toml, tmp_path):
    root, _ = synth_root
    for name in ("a", "b"):
        assert main(["train", "--config", tiny_toml, "--data", root, "--out", str(tmp_path / name),
                     "--seed", "3"]) == 0
    assert file_hash(str(tmp_path / "a" / "last.ckpt")) == file_hash(str(tmp_path / "b" / "last.ckpt"))
    header, _ = load_checkpoint(str(tmp_path / "a" / "last.ckpt"))
    assert header["config"]["train"]["seed"] == 3


def test_ablated_training_and_report(synth_root, tiny_toml, tmp_path, capsys):
    root, _ = synth_root
    runs = tmp_path / "runs"
    assert main(["train", "--config", tiny_toml, "--data", root, "--out", str(runs / "full")]) == 0
    assert main(["train", "--config", tiny_toml, "--data", root, "--out", str(runs / "no_local"),
                 "--ablate", "no_local"]) == 0
    header, arrays = load_checkpoint(str(runs / "no_local" / "last.ckpt"))
    assert header["descriptor_width"] == 8
    assert header["config"]["train"]["no_local"] is True
    capsys.readouterr()
    assert main(["report", "--runs", str(runs), "--out", str(tmp_path / "report.csv")]) == 0
    out = capsys.readouterr().out
    assert "full" in out and "no_local" in out
    assert (tmp_path / "report.csv").exists()


def test_inspect_heatmaps(synth_root, tmp_path):
    root, _ = synth_root
    out = tmp_path / "heat"
    assert main(["inspect-heatmaps", "--data", root, "--key", "p0001_c1_t0", "--out", str(out),
                 "--backbone.T", "2", "--train.T", "2"]) == 0
    with Image.open(out / "frame0_left_arm.png") as im:
        assert im.mode == "L" and im.size == (32, 64)
    with Image.open(out / "frame0_left_arm_overlay.png") as im:
        assert im.mode == "RGB"
    assert (out / "patches_torso.png").exists()
