"""Pixel-level geometric primitives: box/mask IoU, IoUMax, blackout rasters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coco_io import RleMask, rle_decode, rle_encode


def bbox_iou(a, b) -> float:
    """IoU of two (x, y, w, h) boxes; area = w*h (COCO arithmetic)."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError(f"degenerate box: {a} vs {b}")
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _fg_intervals(rle: RleMask) -> np.ndarray:
    """Foreground runs as an (n, 2) array of [start, end) in flat column-major order."""
    bounds = np.concatenate(([0], np.cumsum(rle.counts)))
    starts = bounds[1:-1:2] if len(bounds) > 2 else np.empty(0, dtype=np.int64)
    ends = bounds[2::2]
    return np.stack([starts, ends[: len(starts)]], axis=1) if len(starts) else np.empty((0, 2), dtype=np.int64)


def _interval_intersection(a: np.ndarray, b: np.ndarray) -> int:
    """Total overlap length of two sorted, disjoint interval lists."""
    total = 0
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i, 0], b[j, 0])
        hi = min(a[i, 1], b[j, 1])
        if hi > lo:
            total += hi - lo
        if a[i, 1] < b[j, 1]:
            i += 1
        else:
            j += 1
    return int(total)


def mask_iou(a: RleMask, b: RleMask, b_iscrowd: bool = False) -> float:
    """Mask IoU on runs; crowd ``b`` uses area(a) as the denominator."""
    if a.size != b.size:
        raise ValueError(f"mask size mismatch: {a.size} vs {b.size}")
    inter = _interval_intersection(_fg_intervals(a), _fg_intervals(b))
    area_a, area_b = a.area, b.area
    denom = area_a if b_iscrowd else area_a + area_b - inter
    return inter / denom if denom > 0 else 0.0


def iou_max(instances) -> tuple[list[float], str]:
    """Per-instance max IoU against every other instance in the image.

    Uses masks when every instance has one, bboxes otherwise; returns
    (values, mode) with mode in {"mask", "bbox"}.
    """
    n = len(instances)
    if n == 0:
        return [], "mask"
    use_masks = all(getattr(i, "mask", None) is not None for i in instances)
    mode = "mask" if use_masks else "bbox"
    vals = [0.0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if use_masks:
                v = mask_iou(instances[i].mask, instances[j].mask)
            else:
                v = bbox_iou(instances[i].bbox, instances[j].bbox)
            if v > vals[i]:
                vals[i] = v
            if v > vals[j]:
                vals[j] = v
    return vals, mode


@dataclass(frozen=True)
class BlackoutRaster:
    """Accumulated union of processed-instance masks; immutable snapshot."""

    size: tuple[int, int]
    mask: RleMask | None = None  # None = empty raster

    @property
    def coverage(self) -> int:
        return 0 if self.mask is None else self.mask.area

    def decode(self) -> np.ndarray:
        if self.mask is None:
            return np.zeros(self.size, dtype=bool)
        return rle_decode(self.mask)


def blackout_apply(raster: BlackoutRaster, mask: RleMask) -> BlackoutRaster:
    """Union a mask into the raster, returning a new raster."""
    if raster.size != mask.size:
        raise ValueError(f"raster/mask size mismatch: {raster.size} vs {mask.size}")
    if raster.mask is None:
        return BlackoutRaster(size=raster.size, mask=mask)
    merged = rle_encode(rle_decode(raster.mask) | rle_decode(mask))
    return BlackoutRaster(size=raster.size, mask=merged)


def visible_fraction(instance_mask: RleMask, raster: BlackoutRaster) -> float:
    """Fraction of the mask not yet covered by the blackout raster."""
    if raster.size != instance_mask.size:
        raise ValueError(f"size mismatch: {instance_mask.size} vs {raster.size}")
    area = instance_mask.area
    if area == 0:
        raise ValueError("zero-area mask has no visible fraction")
    if raster.mask is None:
        return 1.0
    inter = _interval_intersection(
        _fg_intervals(instance_mask), _fg_intervals(raster.mask))
    return (area - inter) / area


def mask_from_bbox(bbox, size: tuple[int, int]) -> RleMask:
    """Filled-rectangle mask for a bbox clipped to the image."""
    h, w = size
    x, y, bw, bh = bbox
    m = np.zeros((h, w), dtype=bool)
    x0, y0 = max(int(np.floor(x)), 0), max(int(np.floor(y)), 0)
    x1, y1 = min(int(np.ceil(x + bw)), w), min(int(np.ceil(y + bh)), h)
    if x1 > x0 and y1 > y0:
        m[y0:y1, x0:x1] = True
    return rle_encode(m)
