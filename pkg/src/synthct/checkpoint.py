"""Binary checkpoint container.

Layout::

    b"SYNTHCT\\x00"                 8-byte magic
    uint64 little-endian            header length in bytes
    UTF-8 JSON header               {"format_version", "config", "meta", "tensors": [{name, shape, offset}]}
    float32 little-endian payload   tensors concatenated in manifest order; offsets count values

The same container carries model parameters, optimizer moments and
feature-extractor kernels.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SYNTHCT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray], config: dict | None = None, meta: dict | None = None) -> None:
    manifest = []
    offset = 0
    for name, arr in tensors.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(np.prod(arr.shape, dtype=np.int64))
    header = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "meta": meta or {},
        "tensors": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in tensors.values())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, header)``; tensors are float32 arrays in manifest order."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    payload = np.frombuffer(raw, dtype="<f4", offset=16 + hlen)
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + n > payload.size:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} runs past the payload")
        tensors[entry["name"]] = payload[start:start + n].reshape(entry["shape"]).astype(np.float32)
    return tensors, header


def check_manifest(expected: Mapping[str, tuple], found: Mapping[str, np.ndarray], what: str = "checkpoint") -> None:
    """Raise CheckpointError unless names and shapes agree exactly."""
    missing = [k for k in expected if k not in found]
    extra = [k for k in found if k not in expected]
    if missing or extra:
        raise CheckpointError(f"{what} manifest mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, shape in expected.items():
        if tuple(found[name].shape) != tuple(shape):
            raise CheckpointError(f"{what} manifest mismatch: {name} has shape {found[name].shape}, expected {tuple(shape)}")
