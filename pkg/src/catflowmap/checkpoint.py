"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CFM1"                magic
    u32                    format version
    u32                    kind tag (0 predictor, 1 reward)
    32 bytes               sha256 digest of the model config
    u64                    step count
    u32                    directory length in bytes
    directory              utf-8 JSON: {"config": ..., "tensors": [
                               {"name", "group", "shape", "offset"}, ...]}
    payload                float64 '<f8' arrays, params first, then EMA

Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CFM1"
VERSION = 1
KINDS = {"predictor": 0, "reward": 1}
_HEAD = struct.Struct("<4sII32sQI")


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


def config_digest(model_config: dict) -> bytes:
    blob = json.dumps(model_config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


@dataclass
class Checkpoint:
    kind: str
    config: dict
    step: int
    params: dict
    ema: dict | None = None

    @property
    def digest(self) -> bytes:
        return config_digest(self.config.get("model", {}))


def to_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in KINDS:
        raise CheckpointError(f"unknown kind {ckpt.kind!r}")
    entries, chunks, offset = [], [], 0
    groups = [("params", ckpt.params)] + ([("ema", ckpt.ema)] if ckpt.ema is not None else [])
    for group, tensors in groups:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            entries.append({"name": name, "group": group, "shape": list(arr.shape),
                            "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    directory = json.dumps({"config": ckpt.config, "tensors": entries},
                           sort_keys=True).encode()
    head = _HEAD.pack(MAGIC, VERSION, KINDS[ckpt.kind], ckpt.digest, ckpt.step, len(directory))
    return head + directory + b"".join(chunks)


def from_bytes(blob: bytes, expected_model: dict | None = None) -> Checkpoint:
    if len(blob) < _HEAD.size:
        raise CheckpointError("truncated header")
    magic, version, kind, digest, step, dlen = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version > VERSION:
        raise CheckpointError(f"format version {version} is newer than supported {VERSION}")
    kinds = {v: k for k, v in KINDS.items()}
    if kind not in kinds:
        raise CheckpointError(f"unknown kind tag {kind}")
    start = _HEAD.size
    meta = json.loads(blob[start:start + dlen].decode())
    payload = memoryview(blob)[start + dlen:]
    if config_digest(meta["config"].get("model", {})) != digest:
        raise CheckpointError("stored digest does not match stored config")
    if expected_model is not None and config_digest(expected_model) != digest:
        raise CheckpointMismatch("checkpoint was written for a different model config")
    groups: dict[str, dict] = {"params": {}, "ema": {}}
    for e in meta["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"])
        groups[e["group"]][e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return Checkpoint(kinds[kind], meta["config"], step, groups["params"],
                      groups["ema"] or None)


def atomic_write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    atomic_write(path, to_bytes(ckpt))


def load_checkpoint(path: str | Path, expected_model: dict | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_model)
