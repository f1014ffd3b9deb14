"""Parameter-free attention over feature regions and crucial-region selection.

A region is one spatial cell of a feature map. Maps of shape (c, h, w) are
viewed as (c, h*w) with region ``i = row * w + col``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, abs_, gather_columns, mean, reshape


@dataclass(frozen=True)
class FeatureMap:
    """Region view of an encoder activation: ``values`` is (c, h*w) or batched (N, c, h*w)."""

    values: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.values.ndim not in (2, 3) or self.values.shape[-1] != self.h * self.w:
            raise ShapeError(f"FeatureMap: values {self.values.shape} do not match {self.h}x{self.w} regions")

    @classmethod
    def from_spatial(cls, t: Tensor) -> "FeatureMap":
        """Wrap a (c, h, w) or (N, c, h, w) activation; the reshape is row-major."""
        if t.ndim not in (3, 4):
            raise ShapeError(f"FeatureMap: expected (c,h,w) or (N,c,h,w), got {t.shape}")
        h, w = t.shape[-2:]
        return cls(reshape(t, t.shape[:-2] + (h * w,)), h, w)

    def to_spatial(self) -> Tensor:
        return reshape(self.values, self.values.shape[:-1] + (self.h, self.w))

    @property
    def channels(self) -> int:
        return self.values.shape[-2]

    @property
    def regions(self) -> int:
        return self.h * self.w

    @property
    def batched(self) -> bool:
        return self.values.ndim == 3


@dataclass(frozen=True)
class RegionSet:
    """K region indices in descending attention order; (K,) or (N, K) when batched."""

    indices: np.ndarray

    @property
    def k(self) -> int:
        return int(self.indices.shape[-1])


def _values(f) -> Tensor:
    return f.values if isinstance(f, FeatureMap) else f


def attention_map(f) -> Tensor:
    """Mean absolute activation over channels: (..., c, h*w) -> (..., h*w)."""
    v = _values(f)
    if v.shape[-2] < 1:
        raise ShapeError("attention_map: feature has no channels")
    return mean(abs_(v), axis=-2)


def top_k_regions(attention, k: int) -> RegionSet:
    """Indices of the ``k`` largest attention values; ties go to the lower index."""
    a = attention.data if isinstance(attention, Tensor) else np.asarray(attention, dtype=np.float64)
    n = a.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top_k_regions: K={k} outside [1, {n}]")
    # stable sort on the negated values keeps equal entries in index order
    order = np.argsort(-a, axis=-1, kind="stable")
    return RegionSet(np.ascontiguousarray(order[..., :k]))


def gather_regions(f, regions: RegionSet) -> Tensor:
    """Stack the selected region columns: (..., c, h*w) -> (..., c, K)."""
    return gather_columns(_values(f), regions.indices)
