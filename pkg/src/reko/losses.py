"""Distillation objectives and the frozen projection heads.

Features are (c, M) or batched (N, c, M). Contrastive losses treat student
columns as queries and teacher columns of the same image as keys: the
same-region key is the positive, every other selected teacher column is a
negative. Batched losses are summed over regions and averaged over images.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import FeatureMap, RegionSet, attention_map, gather_regions, top_k_regions
from .tensor import (
    ShapeError,
    Tensor,
    abs_,
    concat,
    l2_normalize,
    logsumexp,
    matmul,
    mean,
    mul,
    reshape,
    sub,
    sum_,
    transpose,
)

BASELINES = ("reko", "region_dis", "l2_regions", "hinton_l1", "attention_transfer", "none")
CONTRASTIVE = ("reko", "region_dis")


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    k: int = 16
    tau: float = 0.07
    embed_dim: int = 64
    normalize_embeddings: bool = True
    baseline: str = "reko"
    head_seed: int = 1234

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}; choose from {BASELINES}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        min_k = 2 if self.baseline in CONTRASTIVE else 1
        if self.k < min_k:
            raise ValueError(f"K={self.k} too small for baseline {self.baseline!r} (need >= {min_k})")

    def to_dict(self) -> dict:
        return asdict(self)


class ProjectionHead:
    """Random linear map channels -> embedding dim, frozen at construction."""

    def __init__(self, in_channels: int, embed_dim: int, seed: int):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((embed_dim, in_channels)) / np.sqrt(in_channels)
        self.weight = Tensor(w, requires_grad=False)
        self.weight.data.flags.writeable = False
        self.seed = seed

    @classmethod
    def from_weight(cls, weight) -> "ProjectionHead":
        head = cls.__new__(cls)
        head.weight = Tensor(weight, requires_grad=False)
        head.weight.data.flags.writeable = False
        head.seed = None
        return head

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, feats: Tensor, normalize: bool = True) -> Tensor:
        return project(self, feats, normalize)


@dataclass(frozen=True)
class ProjectionHeads:
    student: ProjectionHead
    teacher: ProjectionHead


def make_heads(student_channels: int, teacher_channels: int, embed_dim: int, seed: int) -> ProjectionHeads:
    """Two independent heads; the teacher's draw uses a derived seed."""
    ss = np.random.SeedSequence(seed)
    s_seed, t_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    return ProjectionHeads(
        ProjectionHead(student_channels, embed_dim, s_seed),
        ProjectionHead(teacher_channels, embed_dim, t_seed),
    )


def project(head: ProjectionHead, feats, normalize: bool = True) -> Tensor:
    """``weight @ feats``, optionally scaling each column to unit norm."""
    v = feats.values if isinstance(feats, FeatureMap) else feats
    if v.shape[-2] != head.in_channels:
        raise ShapeError(f"project: features have {v.shape[-2]} channels, head expects {head.in_channels}")
    out = matmul(head.weight, v)
    if normalize:
        out = l2_normalize(out, axis=-2)
    return out


def info_nce(v: Tensor, v_pos: Tensor, v_negs: Tensor, tau: float) -> Tensor:
    """InfoNCE for one query ``v`` (d,), positive (d,) and negatives (N, d)."""
    if tau <= 0:
        raise ValueError(f"info_nce: tau must be > 0, got {tau}")
    if v_negs.ndim != 2 or v_negs.shape[0] == 0:
        raise ValueError("info_nce: need at least one negative key")
    d = v.shape[0]
    if v.shape != (d,) or v_pos.shape != (d,) or v_negs.shape[1] != d:
        raise ShapeError(f"info_nce: mismatched dims v={v.shape} pos={v_pos.shape} negs={v_negs.shape}")
    pos = reshape(sum_(mul(v, v_pos)), (1,))
    negs = reshape(matmul(v_negs, reshape(v, (d, 1))), (v_negs.shape[0],))
    logits = concat([pos, negs]) * (1.0 / tau)
    return logsumexp(logits, axis=0) - pos * (1.0 / tau)


def patch_nce(queries: Tensor, keys: Tensor, tau: float) -> Tensor:
    """Patch-wise InfoNCE over all columns of (N, d, M) queries and keys.

    Column i of ``keys`` is the positive for query i; the other M-1 key
    columns are its negatives. Returns the per-image sum, averaged over N.
    """
    if queries.shape != keys.shape:
        raise ShapeError(f"patch_nce: query shape {queries.shape} != key shape {keys.shape}")
    m = queries.shape[-1]
    if m < 2:
        raise ValueError("patch_nce: need at least two regions (one negative per query)")
    logits = matmul(transpose(queries, (0, 2, 1)), keys) * (1.0 / tau)  # (N, query, key)
    positives = sum_(mul(logits, np.eye(m)), axis=-1)
    per_region = sub(logsumexp(logits, axis=-1), positives)
    return mean(sum_(per_region, axis=-1))


def _batched(v: Tensor) -> Tensor:
    return v if v.ndim == 3 else reshape(v, (1,) + v.shape)


def _check_spatial(op: str, fs, ft):
    ms, mt = _features(fs).shape[-1], _features(ft).shape[-1]
    if ms != mt:
        raise ShapeError(f"{op}: student has {ms} regions, teacher has {mt}")
    ns, nt = _features(fs).shape[:-2], _features(ft).shape[:-2]
    if ns != nt:
        raise ShapeError(f"{op}: batch shapes differ, {ns} vs {nt}")


def _features(f) -> Tensor:
    return f.values if isinstance(f, FeatureMap) else f


def region_dis(fs, ft, heads: ProjectionHeads, cfg: DistillConfig) -> Tensor:
    """Contrastive distillation over every region."""
    _check_spatial("region_dis", fs, ft)
    q = project(heads.student, _batched(_features(fs)), cfg.normalize_embeddings)
    k = project(heads.teacher, _batched(_features(ft)), cfg.normalize_embeddings)
    return patch_nce(q, k, cfg.tau)


def crucial_regions(ft, k: int) -> RegionSet:
    """Top-``k`` regions of the teacher's attention map."""
    return top_k_regions(attention_map(_features(ft)).data, k)


def reko_loss(fs, ft, regions: RegionSet, heads: ProjectionHeads, cfg: DistillConfig) -> Tensor:
    """Contrastive distillation restricted to the crucial regions."""
    _check_spatial("reko_loss", fs, ft)
    if regions.k < 2:
        raise ValueError(f"reko_loss: K={regions.k} leaves no negatives (need K >= 2)")
    vs, vt = _batched(_features(fs)), _batched(_features(ft))
    gs = gather_regions(vs, _batched_regions(regions, vs.shape[0]))
    gt = gather_regions(vt, _batched_regions(regions, vt.shape[0]))
    q = project(heads.student, gs, cfg.normalize_embeddings)
    k = project(heads.teacher, gt, cfg.normalize_embeddings)
    return patch_nce(q, k, cfg.tau)


def _batched_regions(r: RegionSet, n: int) -> RegionSet:
    if r.indices.ndim == 2:
        return r
    return RegionSet(np.broadcast_to(r.indices, (n, r.k)))


def l2_regions(fs, ft, regions: RegionSet, heads: ProjectionHeads, cfg: DistillConfig) -> Tensor:
    """Squared distance of projected student/teacher columns, averaged over the crucial regions."""
    _check_spatial("l2_regions", fs, ft)
    if regions.k < 1:
        raise ValueError("l2_regions: empty region set")
    vs, vt = _batched(_features(fs)), _batched(_features(ft))
    gs = gather_regions(vs, _batched_regions(regions, vs.shape[0]))
    gt = gather_regions(vt, _batched_regions(regions, vt.shape[0]))
    diff = sub(
        project(heads.student, gs, cfg.normalize_embeddings),
        project(heads.teacher, gt, cfg.normalize_embeddings),
    )
    return mean(sum_(mul(diff, diff), axis=-2))


def hinton_l1(img_s: Tensor, img_t: Tensor) -> Tensor:
    """Mean absolute difference between student and teacher outputs."""
    if img_s.shape != img_t.shape:
        raise ShapeError(f"hinton_l1: image shapes differ, {img_s.shape} vs {img_t.shape}")
    return mean(abs_(sub(img_s, img_t)))


def attention_transfer(fs, ft) -> Tensor:
    """Squared L2 distance between unit-normalised attention maps, averaged over the batch."""
    _check_spatial("attention_transfer", fs, ft)
    a_s = l2_normalize(attention_map(_batched(_features(fs))), axis=-1)
    a_t = l2_normalize(attention_map(_batched(_features(ft))), axis=-1)
    diff = sub(a_s, a_t)
    return mean(sum_(mul(diff, diff), axis=-1))


def similarity_map(fs, ft, query_region: int, heads: ProjectionHeads) -> np.ndarray:
    """Cosine similarity of one projected student column against every projected teacher column."""
    vs, vt = _features(fs), _features(ft)
    if vs.ndim != 2 or vt.ndim != 2:
        raise ShapeError("similarity_map: expects a single (c, h*w) feature per network")
    _check_spatial("similarity_map", vs, vt)
    m = vs.shape[-1]
    if not 0 <= query_region < m:
        raise IndexError(f"similarity_map: region {query_region} outside [0, {m})")
    q = project(heads.student, vs, normalize=True).data[:, query_region]
    keys = project(heads.teacher, vt, normalize=True).data
    return np.clip(q @ keys, -1.0, 1.0)


def distill_loss(cfg: DistillConfig, heads: ProjectionHeads, fs, ft, img_s=None, img_t=None):
    """Selected distillation objective, or None when ``cfg.baseline == 'none'``."""
    kind = cfg.baseline
    if kind == "none":
        return None
    if kind == "reko":
        return reko_loss(fs, ft, crucial_regions(ft, cfg.k), heads, cfg)
    if kind == "region_dis":
        return region_dis(fs, ft, heads, cfg)
    if kind == "l2_regions":
        return l2_regions(fs, ft, crucial_regions(ft, cfg.k), heads, cfg)
    if kind == "hinton_l1":
        if img_s is None or img_t is None:
            raise ValueError("hinton_l1 needs student and teacher images")
        return hinton_l1(img_s, img_t)
    if kind == "attention_transfer":
        return attention_transfer(fs, ft)
    raise ValueError(f"unknown baseline {kind!r}")
