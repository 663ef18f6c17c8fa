"""Versioned binary container for named float64 arrays.

Byte layout (all integers little-endian):

    offset 0   4 bytes   magic b"MGCK"
    offset 4   4 bytes   uint32 format version (currently 1)
    offset 8   8 bytes   uint64 manifest length L
    offset 16  L bytes   manifest, UTF-8 JSON (see below)
    offset 16+L          payload: the arrays' raw bytes, concatenated

Each array is stored as little-endian IEEE float64 in C (row-major) order.
The manifest is a JSON object:

    {
      "format": 1,
      "fingerprint": "<config fingerprint or empty string>",
      "meta": { ... caller-defined JSON-safe metadata ... },
      "arrays": [ {"name": str, "shape": [int, ...], "offset": int}, ... ]
    }

Array offsets are relative to the start of the payload. Files are written
to a temporary sibling and atomically renamed into place, so a crash never
leaves a partially written checkpoint under the target name.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"MGCK"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    """Raised when a container cannot be read or fails validation."""


def save_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray],
                meta: dict | None = None, fingerprint: str = "") -> None:
    """Write arrays atomically to ``path`` in the container format."""
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(np.asarray(arr, dtype=np.float64)).astype("<f8")
        entries.append({"name": str(name), "shape": list(buf.shape), "offset": len(payload)})
        payload.extend(buf.tobytes(order="C"))
    manifest = json.dumps(
        {"format": FORMAT_VERSION, "fingerprint": fingerprint,
         "meta": meta or {}, "arrays": entries},
        sort_keys=True, separators=(",", ":")).encode("utf-8")

    blob = bytearray()
    blob.extend(MAGIC)
    blob.extend(struct.pack("<I", FORMAT_VERSION))
    blob.extend(struct.pack("<Q", len(manifest)))
    blob.extend(manifest)
    blob.extend(payload)

    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict, str]:
    """Read a container; returns (arrays, meta, fingerprint)."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc

    payload = raw[16 + mlen:]
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: array {entry['name']} exceeds payload")
        arr = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
    return arrays, manifest.get("meta", {}), manifest.get("fingerprint", "")
