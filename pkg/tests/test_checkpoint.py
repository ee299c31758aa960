"""Tests for checkpoint save/load and its integrity checks"""

import json
import os

import pytest

from core.checkpoint import load_checkpoint, load_text_assets, save_checkpoint, save_text_assets
from core.errors import CheckpointError
from core.text_pipeline import build_vocab
from core.training import train


@pytest.fixture
def trained(tiny_config, tiny_examples, fast_train_config):
    return train(tiny_examples, tiny_config, fast_train_config)


def _manifest(path):
    with open(os.path.join(path, "manifest.json")) as f:
        return json.load(f)


def test_round_trip_is_bitwise(tmp_path, trained):
    save_checkpoint(trained.last, str(tmp_path))
    loaded = load_checkpoint(str(tmp_path))
    assert loaded.equals(trained.last)
    assert loaded.optimizer.t == trained.last.optimizer.t


def test_directory_holds_only_final_files(tmp_path, trained):
    save_checkpoint(trained.checkpoint, str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == ["manifest.json", "params.bin"]


def test_manifest_layout(tmp_path, trained, tiny_config):
    save_checkpoint(trained.checkpoint, str(tmp_path))
    manifest = _manifest(tmp_path)
    assert manifest["dtype"] == "<f8"
    assert manifest["model_config"] == tiny_config.to_dict()
    sections = [entry["section"] for entry in manifest["tensors"]]
    n = len(trained.checkpoint.params)
    assert sections == ["params"] * n + ["adam_m"] * n + ["adam_v"] * n
    assert manifest["blob"]["nbytes"] == 3 * 8 * trained.checkpoint.params.count()


def test_truncated_blob(tmp_path, trained):
    save_checkpoint(trained.checkpoint, str(tmp_path))
    blob_path = os.path.join(tmp_path, "params.bin")
    size = os.path.getsize(blob_path)
    with open(blob_path, "r+b") as f:
        f.truncate(size - 8)
    with pytest.raises(CheckpointError, match=f"truncated: expected {size} bytes, found {size - 8}"):
        load_checkpoint(str(tmp_path))


def test_corrupted_blob(tmp_path, trained):
    save_checkpoint(trained.checkpoint, str(tmp_path))
    blob_path = os.path.join(tmp_path, "params.bin")
    with open(blob_path, "r+b") as f:
        first = f.read(1)
        f.seek(0)
        f.write(bytes([first[0] ^ 0xFF]))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(str(tmp_path))


def test_version_bump(tmp_path, trained):
    save_checkpoint(trained.checkpoint, str(tmp_path))
    manifest = _manifest(tmp_path)
    manifest["version"] += 1
    with open(os.path.join(tmp_path, "manifest.json"), "w") as f:
        json.dump(manifest, f)
    with pytest.raises(CheckpointError, match="unsupported checkpoint version"):
        load_checkpoint(str(tmp_path))


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(str(tmp_path))


def test_config_mismatch(tmp_path, trained):
    save_checkpoint(trained.checkpoint, str(tmp_path))
    manifest = _manifest(tmp_path)
    manifest["model_config"]["d_ff"] = 32
    with open(os.path.join(tmp_path, "manifest.json"), "w") as f:
        json.dump(manifest, f)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path))


def test_text_assets(tmp_path):
    vocab = build_vocab([["chest", "pain", "pain"]], min_freq=1)
    save_text_assets(str(tmp_path), vocab, ("I10", "J449"))
    loaded_vocab, labels = load_text_assets(str(tmp_path))
    assert loaded_vocab == vocab
    assert labels == ("I10", "J449")


def test_text_assets_missing(tmp_path):
    with pytest.raises(CheckpointError, match="vocabulary"):
        load_text_assets(str(tmp_path))
