"""
Checkpoint directories: manifest.json (configs, tensor table, checksums,
epoch, RNG state) next to one little-endian float64 blob holding the
parameters and the optimizer moments in canonical order.
"""

import hashlib
import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import CHECKPOINT_BLOB, CHECKPOINT_MANIFEST, CHECKPOINT_VERSION
from .errors import CheckpointError, ConfigError
from .model import ModelConfig, ModelParams, parameter_shapes
from .text_pipeline import Vocabulary, load_label_space, save_label_space
from .training import Checkpoint, OptimizerState, TrainConfig
from utils.helpers import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "medattn-checkpoint"
BLOB_DTYPE = "<f8"
SECTIONS = ("params", "adam_m", "adam_v")


def _sha256(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def _section_arrays(checkpoint: Checkpoint) -> Dict[str, Dict[str, np.ndarray]]:
    return {
        "params": dict(checkpoint.params.items()),
        "adam_m": checkpoint.optimizer.m,
        "adam_v": checkpoint.optimizer.v,
    }


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """Write checkpoint into directory path; blob first, manifest last"""
    expected = [name for name, _ in parameter_shapes(checkpoint.model_config)]
    if checkpoint.params.names() != expected:
        raise CheckpointError("parameter names do not match the model config")

    chunks: List[bytes] = []
    table = []
    offset = 0
    for section, arrays in _section_arrays(checkpoint).items():
        for name in expected:
            raw = np.ascontiguousarray(arrays[name], dtype=BLOB_DTYPE).tobytes()
            table.append({
                "section": section,
                "name": name,
                "shape": list(arrays[name].shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": _sha256(raw),
            })
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": checkpoint.version,
        "dtype": BLOB_DTYPE,
        "model_config": checkpoint.model_config.to_dict(),
        "train_config": checkpoint.train_config.to_dict(),
        "epoch": checkpoint.epoch,
        "best_val_loss": checkpoint.best_val_loss,
        "stale_epochs": checkpoint.stale_epochs,
        "optimizer_step": checkpoint.optimizer.t,
        "rng_state": checkpoint.rng_state,
        "blob": {"file": CHECKPOINT_BLOB, "nbytes": len(blob), "sha256": _sha256(blob)},
        "tensors": table,
    }
    os.makedirs(path, exist_ok=True)
    atomic_write_bytes(os.path.join(path, CHECKPOINT_BLOB), blob)
    atomic_write_text(os.path.join(path, CHECKPOINT_MANIFEST), json.dumps(manifest, indent=2) + "\n")
    logger.info("Saved checkpoint (epoch %d, %d parameters) to %s",
                checkpoint.epoch, checkpoint.params.count(), path)


def _read_manifest(path: str) -> Dict:
    manifest_path = os.path.join(path, CHECKPOINT_MANIFEST)
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path}: unreadable manifest ({e})") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{manifest_path}: not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('version')!r} (expected {CHECKPOINT_VERSION})"
        )
    return manifest


def load_checkpoint(path: str) -> Checkpoint:
    """Read and verify a checkpoint directory; any mismatch is a CheckpointError"""
    manifest = _read_manifest(path)
    blob_path = os.path.join(path, manifest["blob"]["file"])
    if not os.path.exists(blob_path):
        raise CheckpointError(f"checkpoint blob not found: {blob_path}")
    with open(blob_path, "rb") as f:
        blob = f.read()
    expected_bytes = manifest["blob"]["nbytes"]
    if len(blob) != expected_bytes:
        raise CheckpointError(f"checkpoint blob truncated: expected {expected_bytes} bytes, found {len(blob)}")
    if _sha256(blob) != manifest["blob"]["sha256"]:
        raise CheckpointError("checkpoint blob checksum mismatch")

    try:
        model_config = ModelConfig.from_dict(manifest["model_config"])
        train_config = TrainConfig.from_dict(manifest["train_config"])
    except (ConfigError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint configs are invalid: {e}") from e

    expected = parameter_shapes(model_config)
    sections: Dict[str, Dict[str, np.ndarray]] = {s: {} for s in SECTIONS}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if _sha256(raw) != entry["sha256"]:
            raise CheckpointError(f"checksum mismatch for {entry['section']}/{entry['name']}")
        array = np.frombuffer(raw, dtype=BLOB_DTYPE).astype(np.float64).reshape(entry["shape"])
        sections[entry["section"]][entry["name"]] = array

    for section, arrays in sections.items():
        names = list(arrays)
        if names != [name for name, _ in expected]:
            raise CheckpointError(f"checkpoint {section} tensors do not match the model config")
        for name, shape in expected:
            if arrays[name].shape != tuple(shape):
                raise CheckpointError(
                    f"{section}/{name} has shape {list(arrays[name].shape)}, expected {list(shape)}"
                )

    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        params=ModelParams(sections["params"]),
        optimizer=OptimizerState(sections["adam_m"], sections["adam_v"], int(manifest["optimizer_step"])),
        epoch=int(manifest["epoch"]),
        best_val_loss=float(manifest["best_val_loss"]),
        rng_state=manifest["rng_state"],
        stale_epochs=int(manifest.get("stale_epochs", 0)),
        version=manifest["version"],
    )


def save_text_assets(path: str, vocab: Vocabulary, label_space: Sequence[str]) -> None:
    """Copy the vocabulary and label order next to a checkpoint for prediction"""
    os.makedirs(path, exist_ok=True)
    vocab.save(os.path.join(path, "vocab.txt"))
    save_label_space(label_space, os.path.join(path, "labels.txt"))


def load_text_assets(path: str, vocab_path: Optional[str] = None) -> Tuple[Vocabulary, Tuple[str, ...]]:
    vocab_file = vocab_path or os.path.join(path, "vocab.txt")
    labels_file = os.path.join(os.path.dirname(vocab_file), "labels.txt")
    if not os.path.exists(labels_file):
        labels_file = os.path.join(path, "labels.txt")
    for required in (vocab_file, labels_file):
        if not os.path.exists(required):
            raise CheckpointError(f"missing {required}; prediction needs the training vocabulary and labels")
    return Vocabulary.load(vocab_file), load_label_space(labels_file)
