"""On-disk formats: the MSARR1 array container, checksums and JSON helpers."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

MAGIC = "MSARR1"


class ArtifactError(RuntimeError):
    """A required artifact is missing, malformed or fails its checksum."""


def encode_array(arr) -> bytes:
    a = np.array(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    dims = " ".join(str(d) for d in a.shape)
    header = f"{MAGIC} float64 {a.ndim}" + (f" {dims}" if dims else "") + "\n"
    return header.encode("ascii") + a.tobytes(order="C")


def decode_array(blob: bytes) -> np.ndarray:
    nl = blob.find(b"\n")
    if nl < 0:
        raise ArtifactError("MSARR1 header is not newline-terminated")
    parts = blob[:nl].decode("ascii").split()
    if len(parts) < 3 or parts[0] != MAGIC:
        raise ArtifactError(f"bad MSARR1 header: {blob[:nl]!r}")
    if parts[1] != "float64":
        raise ArtifactError(f"unsupported MSARR1 dtype {parts[1]}")
    ndim = int(parts[2])
    shape = tuple(int(p) for p in parts[3:])
    if len(shape) != ndim:
        raise ArtifactError(f"MSARR1 header declares {ndim} dims but lists {len(shape)}")
    payload = blob[nl + 1:]
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise ArtifactError(f"MSARR1 payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def write_array(path, arr):
    atomic_write_bytes(path, encode_array(arr))


def read_array(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing array file {path}")
    return decode_array(path.read_bytes())


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_dict_checksum(arrays: dict) -> str:
    """Order-independent digest of a name -> array mapping."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(encode_array(arrays[name]))
    return h.hexdigest()


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def atomic_write_bytes(path, blob: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def write_json(path, obj):
    atomic_write_bytes(path, dumps_json(obj).encode())


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing file {path}")
    return json.loads(path.read_text())
