"""
Checkpoints in the MCKP container format.

Layout (little-endian): b"MCKP", u32 version, u32 meta length, canonical JSON
meta, u32 tensor count, then per tensor u16 name length, UTF-8 name, u8 rank,
rank x u32 extents and f32 data. Parameters are stored as ``param/<name>``,
Adam moments as ``adam_m/<name>`` and ``adam_v/<name>``.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from packages.helpers.errors import CheckpointFormatError, DataIOError, VersionMismatchError
from packages.model.model_config import ModelConfig
from packages.model.moe_mamba_mil import MoEMambaMILModel, build_variant
from packages.trainer.optimizer import OptimizerState

logger = logging.getLogger("Checkpoint")

MAGIC = b"MCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    train_config: Dict[str, Any] = field(default_factory=dict)
    epoch: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    best_f1: float = float("-inf")
    best_epoch: int = 0
    history: List[Dict[str, Any]] = field(default_factory=list)
    version: int = FORMAT_VERSION


def _json_safe(value: Any) -> Any:
    """Non-finite floats become null; JSON has no NaN or Infinity."""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    return value


def canonical_json(value: Any) -> bytes:
    return json.dumps(_json_safe(value), sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _history_from_json(rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    return [{k: float("nan") if v is None else v for k, v in row.items()} for row in rows]


def _pack_tensor(name: str, array: np.ndarray) -> bytes:
    name_bytes = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f4")
    return b"".join([
        _U16.pack(len(name_bytes)), name_bytes, _U8.pack(array.ndim),
        struct.pack(f"<{array.ndim}I", *array.shape), array.tobytes(),
    ])


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = {
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config,
        "epoch": ckpt.epoch,
        "step": ckpt.optimizer.step,
        "rng_state": ckpt.rng_state,
        "best_f1": ckpt.best_f1 if np.isfinite(ckpt.best_f1) else None,
        "best_epoch": ckpt.best_epoch,
        "history": ckpt.history,
    }
    meta_bytes = canonical_json(meta)
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam_m/{k}", v) for k, v in ckpt.optimizer.m.items()]
    tensors += [(f"adam_v/{k}", v) for k, v in ckpt.optimizer.v.items()]
    parts = [_PREFIX.pack(MAGIC, ckpt.version, len(meta_bytes)), meta_bytes, _U32.pack(len(tensors))]
    parts.extend(_pack_tensor(name, array) for name, array in tensors)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointFormatError(f"truncated {what} at byte offset {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.take(fmt.size, what))


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    magic, version, meta_length = reader.unpack(_PREFIX, "header")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    try:
        meta = json.loads(reader.take(meta_length, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable checkpoint metadata: {e}") from e

    (count,) = reader.unpack(_U32, "tensor count")
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(count):
        (name_length,) = reader.unpack(_U16, "tensor name length")
        name = reader.take(name_length, "tensor name").decode("utf-8")
        (rank,) = reader.unpack(_U8, "tensor rank")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"extents of {name}"))
        size = int(np.prod(shape)) if rank else 1
        array = np.frombuffer(reader.take(4 * size, f"data of {name}"), dtype="<f4").astype(np.float32)
        group, _, key = name.partition("/")
        if group not in groups:
            raise CheckpointFormatError(f"unknown tensor group in '{name}'")
        groups[group][key] = array.reshape(shape)
    if reader.offset != len(data):
        raise CheckpointFormatError(f"{len(data) - reader.offset} trailing bytes in checkpoint")

    best_f1 = meta.get("best_f1")
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model"]),
        params=groups["param"],
        optimizer=OptimizerState(step=int(meta.get("step", 0)), m=groups["adam_m"], v=groups["adam_v"]),
        train_config=meta.get("train", {}),
        epoch=int(meta.get("epoch", 0)),
        rng_state=meta.get("rng_state"),
        best_f1=float("-inf") if best_f1 is None else float(best_f1),
        best_epoch=int(meta.get("best_epoch", 0)),
        history=_history_from_json(meta.get("history", [])),
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    data = encode_checkpoint(ckpt)
    tmp_path = f"{path}.tmp"
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(tmp_path, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except OSError as e:
        logger.error(f"Could not write checkpoint {path}: {e}")
        raise DataIOError(f"could not write checkpoint {path}: {e}") from e
    logger.debug(f"Checkpoint for epoch {ckpt.epoch} saved to {path} ({len(data)} bytes)")


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        logger.error(f"Could not read checkpoint {path}: {e}")
        raise DataIOError(f"could not read checkpoint {path}: {e}") from e
    try:
        return decode_checkpoint(data)
    except CheckpointFormatError as e:
        logger.error(f"Malformed checkpoint {path}: {e}")
        raise


def restore_model(ckpt: Checkpoint) -> MoEMambaMILModel:
    model = build_variant(ckpt.model_config)
    model.load_state_dict(ckpt.params)
    return model
