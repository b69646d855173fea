"""Checkpoint files: ``MSDT`` magic, u16 version, u32 header length, JSON header, float64 blobs."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from masdt.flow import atomic_write

MAGIC = b"MSDT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    def __init__(self, expected: str, found: str, path=None):
        where = f" in {path}" if path else ""
        super().__init__(f"config fingerprint mismatch{where}: expected {expected}, checkpoint has {found}")
        self.expected = expected
        self.found = found


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint(config: dict) -> str:
    """Stable hash of the canonical serialization of a config mapping."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    config: dict
    params: Dict[str, np.ndarray]
    optimizer: Optional[dict] = None  # {"hyper": {...}, "arrays": {name: array}}
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    opt_header = None
    if ckpt.optimizer is not None:
        opt_header = ckpt.optimizer["hyper"]
        tensors += [(f"optim/{k}", v) for k, v in sorted(ckpt.optimizer["arrays"].items())]
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "fingerprint": ckpt.fingerprint,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "optimizer": opt_header,
        "tensors": manifest,
    }
    head = canonical_json(header).encode("utf-8")
    return MAGIC + struct.pack("<HI", VERSION, len(head)) + head + b"".join(blobs)


def decode_checkpoint(blob: bytes, source=None) -> Checkpoint:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError(f"{source or 'checkpoint'}: bad magic, not a checkpoint file")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != VERSION:
        raise CheckpointError(f"{source or 'checkpoint'}: unsupported version {version} (expected {VERSION})")
    try:
        header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source or 'checkpoint'}: corrupt header ({exc})") from exc
    body = blob[10 + hlen:]
    params, arrays = {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(body):
            raise CheckpointError(f"{source or 'checkpoint'}: tensor {entry['name']} truncated")
        arr = np.frombuffer(body[start:end], dtype="<f8").reshape(shape).astype(np.float64)
        kind, name = entry["name"].split("/", 1)
        (params if kind == "param" else arrays)[name] = arr
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = {"hyper": header["optimizer"], "arrays": arrays}
    ckpt = Checkpoint(header["config"], params, optimizer, header.get("meta", {}))
    if ckpt.fingerprint != header["fingerprint"]:
        raise CheckpointError(f"{source or 'checkpoint'}: stored fingerprint does not match its config")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Atomic write (temp file then rename)."""
    path = Path(path)
    atomic_write(path, encode_checkpoint(ckpt))
    return path


def load_checkpoint(path, expected_fingerprint: Optional[str] = None,
                    strict: bool = False) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode_checkpoint(blob, path)
    if strict and expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint:
        raise FingerprintMismatch(expected_fingerprint, ckpt.fingerprint, path)
    return ckpt
