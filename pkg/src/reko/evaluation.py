"""Image-quality proxies, localisation IoU, similarity diagonality and stability."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import RegionSet, attention_map, top_k_regions
from .losses import ProjectionHeads, project
from .pnm import minmax_uint8, to_uint8, write_pgm, write_ppm
from .tensor import Tensor, no_grad

PSNR_PEAK = 2.0
PSNR_CAP = 99.0


@dataclass
class MetricsReport:
    fg_mse: float
    bg_mse: float
    psnr: float
    region_iou: float | None = None
    diagonality: float | None = None
    metric_variance: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("fg_mse", "bg_mse", "psnr", "region_iou", "diagonality", "metric_variance"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"MetricsReport.{name} is not finite: {v}")
        if self.region_iou is not None and not 0.0 <= self.region_iou <= 1.0:
            raise ValueError(f"region_iou {self.region_iou} outside [0, 1]")
        if self.diagonality is not None and not -1.0 <= self.diagonality <= 1.0:
            raise ValueError(f"diagonality {self.diagonality} outside [-1, 1]")

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def psnr(mse: float, peak: float = PSNR_PEAK) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def image_errors(outputs: np.ndarray, targets: np.ndarray, masks: np.ndarray) -> dict:
    """Foreground/background/overall MSE and PSNR for (N, 3, H, W) arrays and (N, H, W) masks."""
    if outputs.shape != targets.shape:
        raise ValueError(f"output shape {outputs.shape} != target shape {targets.shape}")
    if len(outputs) == 0:
        raise ValueError("empty evaluation split")
    sq = (outputs - targets) ** 2
    fg = np.broadcast_to(masks[:, None].astype(bool), sq.shape)
    fg_mse = float(sq[fg].mean()) if fg.any() else 0.0
    bg_mse = float(sq[~fg].mean()) if (~fg).any() else 0.0
    mse = float(sq.mean())
    return {"fg_mse": fg_mse, "bg_mse": bg_mse, "mse": mse, "psnr": psnr(mse)}


def predict(model, inputs: np.ndarray, batch_size: int = 32) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            outs.append(model(Tensor(inputs[i:i + batch_size])).data)
    return np.concatenate(outs)


def quality_metrics(model, split) -> dict:
    """Errors of ``model`` on an evaluation :class:`~reko.synth.Split`."""
    if len(split) == 0:
        raise ValueError("empty evaluation split")
    return image_errors(predict(model, split.inputs), split.targets, split.masks)


def mask_cells(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Region indices whose pixel block is at least half object (majority vote, ties count)."""
    h, w = mask.shape
    gh, gw = grid
    if h % gh or w % gw:
        raise ValueError(f"mask {h}x{w} not divisible into a {gh}x{gw} grid")
    frac = mask.reshape(gh, h // gh, gw, w // gw).astype(np.float64).mean(axis=(1, 3))
    return np.flatnonzero(frac.reshape(-1) >= 0.5)


def region_iou(regions, mask: np.ndarray, grid: tuple[int, int] = (8, 8)) -> float:
    idx = regions.indices if isinstance(regions, RegionSet) else np.asarray(regions)
    pk = set(int(i) for i in np.ravel(idx))
    cells = set(int(i) for i in mask_cells(mask, grid))
    union = pk | cells
    if not union:
        return 1.0
    return len(pk & cells) / len(union)


def random_iou_baseline(k: int, n_cells: int, n_regions: int = 64, draws: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo mean IoU of a uniformly random K-subset against a fixed set of ``n_cells``."""
    rng = np.random.default_rng(seed)
    picks = rng.random((draws, n_regions)).argsort(axis=1)[:, :k]
    inter = (picks < n_cells).sum(axis=1)
    return float(np.mean(inter / (k + n_cells - inter)))


def localization_iou(teacher, split, k: int = 16, batch_size: int = 32) -> list[float]:
    """IoU of teacher top-``k`` attention regions with each sample's mask cells."""
    out = []
    grid = (teacher.spec.bottleneck_size,) * 2
    with no_grad():
        for i in range(0, len(split), batch_size):
            feats = teacher.encode(Tensor(split.inputs[i:i + batch_size]))
            att = attention_map(feats.reshape(feats.shape[0], feats.shape[1], -1)).data
            regions = top_k_regions(att, k)
            for j, idx in enumerate(regions.indices):
                out.append(region_iou(idx, split.masks[i + j], grid))
    return out


def _cosine_matrix(heads: ProjectionHeads, fs: np.ndarray, ft: np.ndarray) -> np.ndarray:
    q = project(heads.student, Tensor(fs), normalize=True).data
    k = project(heads.teacher, Tensor(ft), normalize=True).data
    return np.swapaxes(q, -1, -2) @ k  # (..., query region, key region)


def diagonality_from_features(heads: ProjectionHeads, fs: np.ndarray, ft: np.ndarray) -> float:
    """Mean over regions of same-region cosine minus mean cross-region cosine."""
    sim = _cosine_matrix(heads, fs, ft)
    m = sim.shape[-1]
    diag = np.diagonal(sim, axis1=-2, axis2=-1)
    off = (sim.sum(axis=-1) - diag) / (m - 1)
    return float(np.clip(np.mean(diag - off), -1.0, 1.0))


def diagonality(student, teacher, inputs: np.ndarray, heads: ProjectionHeads) -> float:
    with no_grad():
        fs = student.encode(Tensor(inputs))
        ft = teacher.encode(Tensor(inputs))
    fs = fs.data.reshape(fs.shape[0], fs.shape[1], -1)
    ft = ft.data.reshape(ft.shape[0], ft.shape[1], -1)
    return diagonality_from_features(heads, fs, ft)


def stability_score(values, metric: str = "fg_mse") -> float:
    """Population variance over the final third of an eval series (>= 6 points).

    ``values`` is a list of numbers or a RunRecord / list of epoch dicts
    carrying ``metric``.
    """
    if hasattr(values, "epochs"):
        values = values.epochs
    series = [v[metric] if isinstance(v, dict) else v for v in values]
    series = [float(v) for v in series if v is not None]
    if len(series) < 6:
        raise ValueError(f"stability_score needs >= 6 eval points, got {len(series)}")
    tail = np.asarray(series[len(series) - len(series) // 3:])
    return float(np.var(tail))


# -- visual exports ------------------------------------------------------------------


def save_attention_pgm(path, attention: np.ndarray, grid: tuple[int, int], scale: int = 8):
    """Per-image min-max normalised attention map, upscaled by pixel repetition."""
    img = minmax_uint8(np.asarray(attention).reshape(grid))
    return write_pgm(path, np.kron(img, np.ones((scale, scale), dtype=np.uint8)))


def save_similarity_pgm(path, similarity: np.ndarray, grid: tuple[int, int], scale: int = 8):
    """Cosine similarities mapped [-1, 1] -> [0, 255]."""
    img = to_uint8(np.asarray(similarity).reshape(grid), -1.0, 1.0)
    return write_pgm(path, np.kron(img, np.ones((scale, scale), dtype=np.uint8)))


def save_panel_ppm(path, *images: np.ndarray):
    """Concatenate (3, H, W) images in [-1, 1] left to right."""
    return write_ppm(path, to_uint8(np.concatenate(images, axis=2), -1.0, 1.0))
