"""Binary PGM/PPM writers for quick visual inspection."""

from pathlib import Path

import numpy as np


def to_uint8(values, lo: float, hi: float) -> np.ndarray:
    """Affinely map [lo, hi] to [0, 255], clipping outside values."""
    v = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)


def minmax_uint8(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return to_uint8(v, lo, hi)


def write_pgm(path, gray: np.ndarray) -> Path:
    """Write an (H, W) uint8 array as binary PGM."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"write_pgm: need a 2-D uint8 array, got {gray.dtype} {gray.shape}")
    path = Path(path)
    h, w = gray.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())
    return path


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Write a (3, H, W) uint8 array as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"write_ppm: need a (3, H, W) uint8 array, got {rgb.dtype} {rgb.shape}")
    path = Path(path)
    _, h, w = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb.transpose(1, 2, 0)).tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read back a P5/P6 file written by this module: (H, W) or (3, H, W) uint8."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    magic, dims, _maxval, payload = parts
    w, h = (int(v) for v in dims.split())
    if magic == b"P5":
        return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
