"""Binary checkpoint serialization.

Layout (all integers little-endian):
  magic "CSST" (4 bytes)
  version u32
  config length u32, then UTF-8 JSON {"model": {...}, "meta": {...}}
  tensor count u32
  per tensor: name length u32, name UTF-8, ndim u32, dims u64 each,
              dtype u8 (0 = f32, 1 = f64), raw little-endian values
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights
from .tensor import Parameter

MAGIC = b"CSST"
VERSION = 1

_OPTIM_PREFIX = "optim."


class CheckpointError(ValueError):
    """Raised on corrupt files, version or shape mismatches."""


@dataclass
class Checkpoint:
    version: int
    model_config: dict
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def weight_tensors(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors.items() if not n.startswith(_OPTIM_PREFIX)}

    def optimizer_tensors(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors.items() if n.startswith(_OPTIM_PREFIX)}


def save_checkpoint(path, weights: ModelWeights, config: ModelConfig,
                    meta: dict | None = None, optimizer=None) -> None:
    """Write weights (and optionally Adam state) to a checkpoint file."""
    meta = dict(meta or {})
    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in weights.items()]
    if optimizer is not None:
        meta["adam_t"] = optimizer.t
        for name, arr in optimizer.m.items():
            tensors.append((f"{_OPTIM_PREFIX}m.{name}", arr))
        for name, arr in optimizer.v.items():
            tensors.append((f"{_OPTIM_PREFIX}v.{name}", arr))

    blob = json.dumps({"model": config.to_dict(), "meta": meta},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            if arr.dtype == np.float32:
                f.write(struct.pack("<B", 0))
                f.write(arr.astype("<f4", copy=False).tobytes())
            elif arr.dtype == np.float64:
                f.write(struct.pack("<B", 1))
                f.write(arr.astype("<f8", copy=False).tobytes())
            else:
                raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")


def _read(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"corrupt checkpoint: expected {n} bytes, got {len(data)}")
    return data


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint file."""
    path = Path(path)
    with open(path, "rb") as f:
        if _read(f, 4) != MAGIC:
            raise CheckpointError(f"{path}: magic mismatch, not a checkpoint file")
        (version,) = struct.unpack("<I", _read(f, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read(f, 4))
        try:
            blob = json.loads(_read(f, blob_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt config block: {exc}") from None
        (count,) = struct.unpack("<I", _read(f, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(f, 4))
            name = _read(f, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read(f, 4))
            dims = struct.unpack(f"<{ndim}Q", _read(f, 8 * ndim)) if ndim else ()
            (dtype_code,) = struct.unpack("<B", _read(f, 1))
            if dtype_code == 0:
                dtype, width = np.dtype("<f4"), 4
            elif dtype_code == 1:
                dtype, width = np.dtype("<f8"), 8
            else:
                raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {dtype_code}")
            n_values = int(np.prod(dims)) if dims else 1
            raw = _read(f, width * n_values)
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after tensor block")
    return Checkpoint(version, blob.get("model", {}), blob.get("meta", {}), tensors)


def restore_weights(ckpt: Checkpoint, weights: ModelWeights) -> None:
    """Copy checkpoint values into an existing weight set, validating shapes."""
    stored = ckpt.weight_tensors()
    for name, p in weights.items():
        if name not in stored:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        arr = stored[name]
        if arr.shape != p.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.shape}")
        p.data[...] = arr.astype(p.dtype, copy=False)
    extra = set(stored) - set(weights.names())
    if extra:
        raise CheckpointError(f"checkpoint holds unknown tensors: {sorted(extra)}")


def weights_from_checkpoint(ckpt: Checkpoint) -> tuple[ModelConfig, ModelWeights]:
    """Rebuild the model configuration and weights stored in a checkpoint."""
    config = ModelConfig.from_dict(ckpt.model_config)
    params = {}
    for name, arr in ckpt.weight_tensors().items():
        trainable = ".running_" not in name
        params[name] = Parameter(arr.copy(), trainable=trainable)
    return config, ModelWeights(params)
