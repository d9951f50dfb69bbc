"""Flat-file model checkpoints.

Layout: magic line, header length line, JSON header, then every parameter as
raw little-endian float32 in header order. The header records the spec hash,
seed, epoch, metrics and each tensor's shape and byte offset.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"ABSLAB-CKPT\n"
VERSION = 1


def save_checkpoint(path, model, spec_hash: str, seed: int, epoch: int = 0, metrics: dict | None = None) -> Path:
    path = Path(path)
    table = []
    offset = 0
    blobs = []
    for name, p in model.named_parameters().items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "spec_hash": spec_hash,
        "seed": int(seed),
        "epoch": int(epoch),
        "metrics": metrics or {},
        "dtype": "<f4",
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(head)}\n".encode())
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, name -> array) without touching any model."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    rest = raw[len(MAGIC) :]
    try:
        nl = rest.index(b"\n")
        n = int(rest[:nl])
        header = json.loads(rest[nl + 1 : nl + 1 + n])
    except (ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    body = rest[nl + 1 + n :]
    arrays = {}
    for entry in header.get("tensors", []):
        start, size = entry["offset"], entry["nbytes"]
        if start + size > len(body) or size != 4 * int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {entry['name']} is truncated or inconsistent")
        arrays[entry["name"]] = np.frombuffer(body[start : start + size], dtype="<f4").reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path, model, spec_hash: str | None = None, allow_partial: bool = False) -> dict:
    """Load weights into ``model``; returns the header.

    A spec-hash mismatch is an error unless ``allow_partial`` is set, in which
    case only tensors whose name and shape match are copied.
    """
    header, arrays = read_checkpoint(path)
    if spec_hash is not None and header["spec_hash"] != spec_hash and not allow_partial:
        raise CheckpointError(f"{path}: spec hash {header['spec_hash'][:12]} does not match model {spec_hash[:12]}")
    try:
        loaded = model.load_state_dict(arrays, strict=not allow_partial)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    header["loaded"] = loaded
    return header
