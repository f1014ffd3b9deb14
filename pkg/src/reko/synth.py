"""Paired synthetic translation task with ground-truth object masks.

Input: smooth colour gradient plus faint noise, with one to three filled
ellipses. Target: the same image with a black/white stripe texture painted
over the ellipses (period 4 px; vertical stripes for wide objects,
horizontal for tall ones). Outside the mask the target equals the input.

Sample file layout (little-endian)::

    b"RKSM" | u32 version | input tensor | target tensor | mask tensor

where each tensor uses the RKTN layout from :mod:`reko.serialize`; the mask
is stored as 0.0/1.0.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pnm import to_uint8, write_ppm
from .serialize import FormatError, file_sha256, read_tensor, write_tensor

SAMPLE_MAGIC = b"RKSM"
SAMPLE_VERSION = 1
DATASET_FORMAT = 1

IMAGE_SIZE = 64
STRIPE_PERIOD = 4
STRIPE_DARK = -0.85
STRIPE_LIGHT = 0.85
MASK_BAND = (0.15, 0.35)
NOISE_STD = 0.03


@dataclass(frozen=True)
class Sample:
    input: np.ndarray  # (3, 64, 64) float64 in [-1, 1]
    target: np.ndarray  # (3, 64, 64)
    mask: np.ndarray  # (64, 64) uint8, 1 = object
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.input, other.input)
            and np.array_equal(self.target, other.target)
            and np.array_equal(self.mask, other.mask)
        )


def _ellipses(rng, size, yy, xx):
    """Draw 1-3 axis-aligned ellipses; returns (mask, per-pixel owner index or -1, list of params).

    Each ellipse lies either along x or along y, so its stripe orientation is
    unambiguous from its silhouette.
    """
    n = int(rng.integers(1, 4))
    owner = np.full((size, size), -1, dtype=np.int64)
    params = []
    for e in range(n):
        a = rng.uniform(7.0, 16.0)
        b = a * rng.uniform(0.4, 0.75)
        theta = 0.0 if rng.uniform(0.0, np.pi) < np.pi / 2 else np.pi / 2
        cy, cx = rng.uniform(a * 0.6, size - a * 0.6, size=2)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        owner[inside] = e
        params.append({"theta": theta, "color": rng.uniform(-0.9, 0.9, size=3)})
    return owner >= 0, owner, params


def generate_sample(seed: int, size: int = IMAGE_SIZE, band=MASK_BAND) -> Sample:
    """Deterministic sample for ``seed``; ellipses are redrawn until the mask area is in ``band``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    gy, gx = yy / (size - 1) * 2 - 1, xx / (size - 1) * 2 - 1

    base = rng.uniform(-0.5, 0.5, size=(3, 1, 1))
    slope = rng.uniform(-0.3, 0.3, size=(2, 3, 1, 1))
    image = base + slope[0] * gx + slope[1] * gy
    image = image + rng.normal(0.0, NOISE_STD, size=(3, size, size))

    for _ in range(1000):
        mask, owner, params = _ellipses(rng, size, yy, xx)
        if band[0] <= mask.mean() <= band[1]:
            break
    else:  # pragma: no cover - band is wide enough in practice
        raise RuntimeError(f"seed {seed}: could not place ellipses within mask band {band}")

    target = image.copy()
    for e, p in enumerate(params):
        region = owner == e
        image[:, region] = p["color"][:, None]
        # object-local orientation: stripes run across the longer extent
        wide = abs(np.cos(p["theta"])) >= abs(np.sin(p["theta"]))
        coord = xx if wide else yy
        on = ((coord // (STRIPE_PERIOD // 2)) % 2) == 0
        target[:, region & on] = STRIPE_DARK
        target[:, region & ~on] = STRIPE_LIGHT
    image = np.clip(image, -1.0, 1.0)
    target = np.where(mask[None], np.clip(target, -1.0, 1.0), image)
    return Sample(image, target, mask.astype(np.uint8), int(seed))


def sample_seed(dataset_seed: int, split: str, index: int) -> int:
    """Per-sample seed derived from the dataset seed, split and position."""
    split_id = {"train": 0, "eval": 1}[split]
    return int(np.random.SeedSequence([dataset_seed, split_id, index]).generate_state(1, np.uint64)[0] >> 1)


# -- file format -----------------------------------------------------------------


def write_sample(path, sample: Sample) -> None:
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<I", SAMPLE_VERSION))
        write_tensor(fh, sample.input)
        write_tensor(fh, sample.target)
        write_tensor(fh, sample.mask.astype(np.float64))


def read_sample(path, seed: int = -1) -> Sample:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SAMPLE_MAGIC:
            raise FormatError(f"{path}: bad sample magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != SAMPLE_VERSION:
            raise FormatError(f"{path}: unsupported sample version {version}")
        x, y, m = read_tensor(fh), read_tensor(fh), read_tensor(fh)
    return Sample(x, y, m.astype(np.uint8), seed)


def export_ppm(path, sample: Sample) -> Path:
    """Side-by-side input | target | mask strip."""
    mask_rgb = np.repeat(sample.mask[None].astype(np.float64) * 2 - 1, 3, axis=0)
    strip = np.concatenate([sample.input, sample.target, mask_rgb], axis=2)
    return write_ppm(path, to_uint8(strip, -1.0, 1.0))


# -- datasets ----------------------------------------------------------------------


@dataclass
class Split:
    inputs: np.ndarray  # (N, 3, H, W)
    targets: np.ndarray
    masks: np.ndarray  # (N, H, W) uint8
    seeds: list

    def __len__(self):
        return len(self.inputs)

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> "Split":
        if not samples:
            raise ValueError("empty split")
        return cls(
            np.stack([s.input for s in samples]),
            np.stack([s.target for s in samples]),
            np.stack([s.mask for s in samples]),
            [s.seed for s in samples],
        )

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.inputs[idx], self.targets[idx], self.masks[idx], [self.seeds[i] for i in idx])


@dataclass
class Dataset:
    train: Split
    eval: Split
    seed: int

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for split in (self.train, self.eval):
            for arr in (split.inputs, split.targets, split.masks):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def make_dataset(seed: int, n_train: int, n_eval: int) -> Dataset:
    """In-memory dataset, identical to what :func:`generate_dataset` writes."""
    train = [generate_sample(sample_seed(seed, "train", i)) for i in range(n_train)]
    ev = [generate_sample(sample_seed(seed, "eval", i)) for i in range(n_eval)]
    return Dataset(Split.from_samples(train), Split.from_samples(ev), seed)


def generate_dataset(seed: int, n_train: int, n_eval: int, out_dir) -> dict:
    """Write samples under ``out_dir/{train,eval}/`` and a checksummed ``manifest.json``."""
    out = Path(out_dir)
    files = {}
    try:
        for split, n in (("train", n_train), ("eval", n_eval)):
            (out / split).mkdir(parents=True, exist_ok=True)
            for i in range(n):
                s_seed = sample_seed(seed, split, i)
                rel = f"{split}/{i:05d}.rksm"
                write_sample(out / rel, generate_sample(s_seed))
                files[rel] = {"seed": s_seed, "sha256": file_sha256(out / rel)}
    except OSError as e:
        raise OSError(f"writing dataset under {out}: {e}") from e
    overall = hashlib.sha256("".join(files[k]["sha256"] for k in sorted(files)).encode()).hexdigest()
    manifest = {
        "format_version": DATASET_FORMAT,
        "seed": seed,
        "count": n_train + n_eval,
        "splits": {"train": n_train, "eval": n_eval},
        "files": files,
        "checksum": overall,
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out / "manifest.json")
    return manifest


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != DATASET_FORMAT:
        raise FormatError(f"{path}: unsupported dataset format {manifest.get('format_version')}")
    splits = {}
    for split in ("train", "eval"):
        n = manifest["splits"][split]
        samples = []
        for i in range(n):
            rel = f"{split}/{i:05d}.rksm"
            samples.append(read_sample(root / rel, manifest["files"][rel]["seed"]))
        splits[split] = Split.from_samples(samples)
    return Dataset(splits["train"], splits["eval"], manifest["seed"])
