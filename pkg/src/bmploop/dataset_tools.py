"""Dataset statistics, the legacy overlap filter, and annotation merging."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np

from .coco_io import AnnotationSet, Instance, ReferentialIntegrityError
from .evaluator import UndefinedSimilarityError, oks
from .geometry import iou_max

N_BINS = 20
BIN_WIDTH = 0.05


@dataclass(frozen=True)
class DatasetStats:
    n_images: int
    n_keypoint_instances: int
    n_mask_instances: int
    mean_ioumax: float
    ioumax_histogram: tuple[float, ...]  # 20 bins of width 0.05, fractions
    iou_mode: str                        # "mask", "bbox", or "mixed"
    per_mode_mean: dict | None = None


def _per_image(aset: AnnotationSet):
    groups = defaultdict(list)
    for ins in aset.instances:
        groups[ins.image_id].append(ins)
    return groups


def ioumax_values(aset: AnnotationSet) -> tuple[list[float], str, dict]:
    """IoUMax of every instance plus the geometry mode(s) used."""
    values: list[float] = []
    modes = set()
    by_mode = defaultdict(list)
    for instances in _per_image(aset).values():
        vals, mode = iou_max(instances)
        values.extend(vals)
        modes.add(mode)
        by_mode[mode].extend(vals)
    mode = modes.pop() if len(modes) == 1 else "mixed"
    per_mode_mean = {m: float(np.mean(v)) for m, v in by_mode.items() if v}
    return values, mode, per_mode_mean


def histogram(values) -> tuple[float, ...]:
    """Normalized 20-bin histogram over [0, 1]; last bin closed at 1.0."""
    counts, _ = np.histogram(values, bins=N_BINS, range=(0.0, 1.0))
    total = max(len(values), 1)
    return tuple(float(c) / total for c in counts)


def compute_stats(aset: AnnotationSet) -> DatasetStats:
    if not aset.instances:
        raise ValueError("cannot compute statistics of an empty annotation set")
    values, mode, per_mode_mean = ioumax_values(aset)
    return DatasetStats(
        n_images=len(aset.images),
        n_keypoint_instances=sum(1 for i in aset.instances
                                 if i.keypoints is not None and i.num_keypoints > 0),
        n_mask_instances=sum(1 for i in aset.instances if i.mask is not None),
        mean_ioumax=float(np.mean(values)),
        ioumax_histogram=histogram(values),
        iou_mode=mode,
        per_mode_mean=per_mode_mean)


def apply_legacy_filter(aset: AnnotationSet) -> AnnotationSet:
    """Keep only instances with IoUMax = 0 or IoUMax > 0.5.

    IoUMax is computed against the full pre-filter instance list, matching the
    original dataset construction.
    """
    keep: list[Instance] = []
    for instances in _per_image(aset).values():
        vals, _ = iou_max(instances)
        for ins, v in zip(instances, vals):
            if v == 0.0 or v > 0.5:
                keep.append(ins)
    keep.sort(key=lambda i: i.id)
    return replace(aset, instances=tuple(keep))


def merge_annotations(base: AnnotationSet, additions: AnnotationSet,
                      dedup_oks_threshold: float = 0.9) -> AnnotationSet:
    """Union base with keypoint-only additions, suppressing duplicates by OKS.

    Added instances keep no masks and are therefore absent from segmentation
    evaluation; they get fresh unique ids.
    """
    base_images = {im.id for im in base.images}
    unknown = [a.image_id for a in additions.instances
               if a.image_id not in base_images]
    if unknown:
        raise ReferentialIntegrityError(
            f"additions reference unknown images: {sorted(set(unknown))[:20]}",
            unknown)

    sigmas = None
    for c in base.categories:
        if c.sigmas is not None:
            sigmas = c.sigmas
            break
    if sigmas is None:
        raise ValueError("base categories carry no sigmas for OKS dedup")

    by_image = _per_image(base)
    next_id = max((i.id for i in base.instances), default=0) + 1
    merged = list(base.instances)
    n_suppressed = 0
    for add in additions.instances:
        if add.keypoints is None or add.num_keypoints == 0:
            continue
        duplicate = False
        for existing in by_image.get(add.image_id, []):
            if existing.keypoints is None or existing.num_keypoints == 0:
                continue
            try:
                if oks(add.keypoints, existing, sigmas) >= dedup_oks_threshold:
                    duplicate = True
                    break
            except UndefinedSimilarityError:
                continue
        if duplicate:
            n_suppressed += 1
            continue
        merged.append(replace(add, id=next_id, mask=None, ignore=False))
        next_id += 1
    extras = dict(base.extras)
    extras["merge_report"] = {
        "n_base": len(base.instances), "n_additions": len(additions.instances),
        "n_suppressed": n_suppressed, "n_total": len(merged)}
    return replace(base, instances=tuple(merged), extras=extras)


def export_histogram(stats: DatasetStats, path) -> None:
    """CSV of (bin_low, bin_high, fraction) rows for external plotting."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_low", "bin_high", "fraction"])
        for i, frac in enumerate(stats.ioumax_histogram):
            w.writerow([f"{i * BIN_WIDTH:.2f}", f"{(i + 1) * BIN_WIDTH:.2f}",
                        f"{frac:.9f}"])


def read_histogram(path) -> tuple[float, ...]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return tuple(float(r["fraction"]) for r in rows)
