"""Checkpoint container: length-prefixed JSON header + raw float32 blobs.

Layout:
  bytes 0..8   little-endian uint64 N, the header length in bytes
  bytes 8..8+N UTF-8 JSON header: format_version, config, extra, tensor manifest
  remainder    tensor blobs in key-sorted order, little-endian float32, C-order

Every value is float32 on disk; integer buffers are cast on save and restored
to their in-memory dtype by the caller. A save/load/save cycle is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


def save_container(
    path: str | Path,
    tensors: dict,
    config: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Write named arrays plus JSON-serializable config/extra metadata."""
    arrays = {}
    manifest = []
    for key in sorted(tensors):
        # np.asarray with order="C" keeps 0-d arrays 0-d (ascontiguousarray
        # would promote them to 1-d and break shape round-tripping)
        arr = np.asarray(tensors[key], dtype="<f4", order="C")
        arrays[key] = arr
        manifest.append({"key": key, "shape": list(arr.shape)})
    header = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "extra": extra or {},
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(header_bytes)))
        fh.write(header_bytes)
        for key in sorted(arrays):
            fh.write(arrays[key].tobytes(order="C"))


def load_container(path: str | Path) -> tuple[dict, dict, dict]:
    """Read a container; returns (config, extra, {key: float32 ndarray})."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _LEN.size:
        raise FormatError(f"checkpoint {path} is truncated (no header length)")
    (header_len,) = _LEN.unpack_from(raw, 0)
    if len(raw) < _LEN.size + header_len:
        raise FormatError(f"checkpoint {path} is truncated (header incomplete)")
    try:
        header = json.loads(raw[_LEN.size : _LEN.size + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"checkpoint {path} has a malformed header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"checkpoint {path} has format version {version!r}, expected {FORMAT_VERSION}"
        )
    offset = _LEN.size + header_len
    tensors = {}
    for entry in header.get("tensors", []):
        key = entry["key"]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise FormatError(f"checkpoint {path}: blob for {key!r} is truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[key] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(
            f"checkpoint {path} has {len(raw) - offset} unexpected trailing bytes"
        )
    return header.get("config", {}), header.get("extra", {}), tensors
