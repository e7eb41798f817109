"""Checkpoint serialization: JSON manifest + packed little-endian float32 blob.

A checkpoint is one file: magic, manifest length, the manifest (array names,
shapes, init scheme, free-form metadata), then every array's raw bytes in
manifest order. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from offmbrl.autodiff.nn import INIT_SCHEME
from offmbrl.errors import FormatError

MAGIC = b"CKPT"
VERSION = 1


def save_checkpoint(path, named_arrays, meta=None):
    """Write named float32 arrays atomically (temp file + rename)."""
    entries = []
    blobs = []
    for name, arr in named_arrays:
        data = arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr
        data = np.ascontiguousarray(data, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape)})
        blobs.append(data.tobytes())
    manifest = {
        "version": VERSION,
        "init_scheme": INIT_SCHEME,
        "arrays": entries,
        "meta": dict(meta or {}),
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Read a checkpoint; returns (ordered name->array dict, meta dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated checkpoint header")
    (mlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + mlen:
        raise FormatError(f"{path}: truncated checkpoint manifest")
    try:
        manifest = json.loads(raw[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable manifest: {e}") from e
    if manifest.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    offset = 8 + mlen
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated blob at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype="<f4", count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after blob")
    return arrays, manifest.get("meta", {})
