"""Single-file checkpoint container.

Layout: an 8-byte magic, an 8-byte little-endian header length, a UTF-8 JSON
header, then the raw row-major tensor blobs back to back. The header lists
every tensor (name, dtype, shape, offset, nbytes, sha256) plus the config
hash and free-form metadata; a digest over the whole payload catches
truncation and tampering.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError

MAGIC = b"RVCKPT\x00\x01"
VERSION = 1
_DTYPES = {"float64": np.float64, "float32": np.float32, "int64": np.int64, "bool": np.bool_}


class IncompatibleCheckpointError(ConfigError):
    """Checkpoint was written for a different configuration."""


@dataclass
class CheckpointManifest:
    tensors: dict[str, np.ndarray]
    config_hash: str
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config_hash: str, meta: dict | None = None) -> str:
    """Write atomically; returns the sha256 of the written file."""
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.name not in _DTYPES:
            raise ConfigError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {"version": VERSION, "config_hash": config_hash, "meta": meta or {}, "tensors": entries,
              "payload_nbytes": len(payload), "payload_sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    data = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> CheckpointManifest:
    """Read and verify a checkpoint.

    Raises :class:`IntegrityError` on a bad magic, truncation or digest
    mismatch, and :class:`IncompatibleCheckpointError` when ``expected_hash``
    differs from the stored config hash.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint {path} not found") from exc
    if len(data) < 16 or data[:8] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    payload = data[16 + hlen:]
    if len(payload) != header.get("payload_nbytes"):
        raise IntegrityError(f"{path}: payload length {len(payload)} != declared {header.get('payload_nbytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise IntegrityError(f"{path}: payload checksum mismatch")
    if header.get("version") != VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise IncompatibleCheckpointError(
            f"{path}: config hash {header['config_hash'][:12]} does not match current config {expected_hash[:12]}"
        )
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise IntegrityError(f"{path}: tensor {e['name']!r} checksum mismatch")
        dt = np.dtype(_DTYPES[e["dtype"]]).newbyteorder("<")
        tensors[e["name"]] = np.frombuffer(raw, dtype=dt).astype(_DTYPES[e["dtype"]]).reshape(e["shape"])
    return CheckpointManifest(tensors, header["config_hash"], header.get("meta", {}), header["version"])


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
