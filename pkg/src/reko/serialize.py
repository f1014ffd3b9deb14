"""Binary tensor files and checkpoint manifests.

Tensor file layout (little-endian)::

    b"RKTN" | u32 rank | u64 extent * rank | f64 payload (row-major)

A checkpoint is a directory with one tensor file per named parameter and a
``manifest.json`` mapping names to files plus free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"RKTN"
MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def save_checkpoint(directory, params: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``params`` as tensor files plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    checksums = {}
    for name in sorted(params):
        fname = _safe_name(name) + ".rktn"
        if fname in files.values():
            raise FormatError(f"parameter names collide on disk: {name!r}")
        save_tensor(directory / fname, params[name])
        files[name] = fname
        checksums[name] = file_sha256(directory / fname)
    manifest = {
        "format": "rktn-checkpoint",
        "version": MANIFEST_VERSION,
        "tensors": files,
        "sha256": checksums,
        "meta": meta or {},
    }
    path = directory / MANIFEST
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "rktn-checkpoint":
        raise FormatError(f"{path}: not a checkpoint manifest")
    sums = manifest.get("sha256", {})
    params = {}
    for name, fname in manifest["tensors"].items():
        if name in sums and file_sha256(directory / fname) != sums[name]:
            raise FormatError(f"{directory / fname}: checksum does not match manifest")
        params[name] = load_tensor(directory / fname)
    return params, manifest.get("meta", {})
