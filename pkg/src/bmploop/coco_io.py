"""COCO-format annotation/result I/O and the run-length mask codec.

Everything downstream (geometry, evaluation, the loop engine) works on the
types defined here.  Masks are normalized to RLE at parse time: polygons are
rasterized, uncompressed RLE dicts and compressed strings are both accepted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

# COCO person skeleton constants, used as defaults when the annotation file
# does not carry them (official files never do).
COCO_KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
COCO_SIGMAS = (
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)


class ParseError(ValueError):
    """Malformed input document.  ``offset`` is a byte offset when known."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class ReferentialIntegrityError(ValueError):
    """Instance references a missing image or category."""

    def __init__(self, message, offending_ids=()):
        super().__init__(message)
        self.offending_ids = list(offending_ids)


class CorruptMaskError(ValueError):
    """RLE whose runs do not sum to height * width, or a truncated string."""


# ---------------------------------------------------------------------------
# RLE codec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RleMask:
    """Column-major run-length encoded binary mask.

    ``counts`` alternates background/foreground runs; the first run counts
    background pixels and may be zero.
    """

    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def __post_init__(self):
        h, w = self.size
        if h <= 0 or w <= 0:
            raise CorruptMaskError(f"non-positive mask size {self.size}")
        if sum(self.counts) != h * w:
            raise CorruptMaskError(
                f"run sum {sum(self.counts)} != {h}x{w}={h * w}")

    @property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))


def rle_encode(mask: np.ndarray) -> RleMask:
    """Encode a 2D boolean/0-1 array (H, W) into column-major RLE."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise CorruptMaskError(f"expected non-empty 2D mask, got shape {mask.shape}")
    flat = mask.flatten(order="F").astype(bool)
    # boundaries where the value changes
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds)
    if flat[0]:  # first run must be background
        counts = np.concatenate(([0], counts))
    return RleMask(size=mask.shape, counts=tuple(int(c) for c in counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    """Decode to a 2D boolean array of shape ``rle.size``."""
    h, w = rle.size
    vals = np.zeros(len(rle.counts), dtype=bool)
    vals[1::2] = True
    flat = np.repeat(vals, np.asarray(rle.counts, dtype=np.int64))
    return flat.reshape((h, w), order="F")


def rle_to_coco_string(rle: RleMask) -> str:
    """Compress to the COCO interchange string.

    Runs after the third are delta-coded against the run two places back;
    each value is emitted little-endian in 5-bit chunks with a continuation
    bit, offset into printable ASCII by 48.
    """
    counts = rle.counts
    out = []
    for i, c in enumerate(counts):
        x = int(c)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c6 = x & 0x1F
            x >>= 5
            more = (x != -1) if (c6 & 0x10) else (x != 0)
            if more:
                c6 |= 0x20
            out.append(chr(c6 + 48))
    return "".join(out)


def rle_from_coco_string(s: str, size: tuple[int, int]) -> RleMask:
    """Inverse of :func:`rle_to_coco_string`."""
    counts: list[int] = []
    p = 0
    n = len(s)
    while p < n:
        x = 0
        k = 0
        more = True
        while more:
            if p >= n:
                raise CorruptMaskError("truncated compressed RLE string")
            c = ord(s[p]) - 48
            if not 0 <= c < 64:
                raise CorruptMaskError(f"invalid character {s[p]!r} at position {p}")
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return RleMask(size=tuple(size), counts=tuple(counts))


def polygons_to_rle(polygons, height: int, width: int) -> RleMask:
    """Rasterize COCO polygon segmentation (even-odd fill, pixel centers)."""
    mask = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        pts = np.asarray(poly, dtype=float).reshape(-1, 2)
        if len(pts) < 3:
            continue
        xs, ys = pts[:, 0], pts[:, 1]
        y0 = max(int(np.floor(ys.min())), 0)
        y1 = min(int(np.ceil(ys.max())) + 1, height)
        xn = np.roll(xs, -1)
        yn = np.roll(ys, -1)
        for row in range(y0, y1):
            cy = row + 0.5
            # edges crossing the scanline at pixel-center height
            crossing = (ys <= cy) != (yn <= cy)
            if not crossing.any():
                continue
            t = (cy - ys[crossing]) / (yn[crossing] - ys[crossing])
            cross_x = np.sort(xs[crossing] + t * (xn[crossing] - xs[crossing]))
            for a, b in zip(cross_x[0::2], cross_x[1::2]):
                lo = int(np.ceil(a - 0.5))
                hi = int(np.floor(b - 0.5))
                if hi >= lo:
                    mask[row, max(lo, 0):min(hi + 1, width)] |= True
    return rle_encode(mask)


# ---------------------------------------------------------------------------
# Annotation / prediction object model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    file_name: str = ""
    extras: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class Category:
    id: int
    name: str = "person"
    keypoint_names: tuple[str, ...] = ()
    sigmas: tuple[float, ...] | None = None
    skeleton: tuple = ()
    extras: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class Instance:
    id: int
    image_id: int
    bbox: tuple[float, float, float, float]
    category_id: int = 1
    mask: RleMask | None = None
    keypoints: np.ndarray | None = None  # (K, 3): x, y, flag in {0,1,2}
    num_keypoints: int = 0
    iscrowd: bool = False
    ignore: bool = False
    area: float = 0.0
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"instance {self.id}: degenerate bbox {self.bbox}")
        if self.keypoints is not None:
            kp = np.asarray(self.keypoints, dtype=float).reshape(-1, 3)
            object.__setattr__(self, "keypoints", kp)
            object.__setattr__(self, "num_keypoints", int((kp[:, 2] > 0).sum()))

    @property
    def keypoints_only(self) -> bool:
        return self.mask is None and self.keypoints is not None


@dataclass(frozen=True)
class AnnotationSet:
    images: tuple[ImageInfo, ...]
    instances: tuple[Instance, ...]
    categories: tuple[Category, ...]
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        image_ids = {im.id for im in self.images}
        dangling = [i.id for i in self.instances if i.image_id not in image_ids]
        if dangling:
            raise ReferentialIntegrityError(
                f"instances reference missing images: {dangling[:20]}", dangling)
        ids = [i.id for i in self.instances]
        if len(set(ids)) != len(ids):
            seen, dup = set(), []
            for i in ids:
                if i in seen:
                    dup.append(i)
                seen.add(i)
            raise ReferentialIntegrityError(f"duplicate instance ids: {dup[:20]}", dup)

    def instances_of(self, image_id: int) -> list[Instance]:
        return [i for i in self.instances if i.image_id == image_id]

    def category(self, category_id: int) -> Category:
        for c in self.categories:
            if c.id == category_id:
                return c
        raise KeyError(category_id)


@dataclass(frozen=True)
class Prediction:
    image_id: int
    score: float
    category_id: int = 1
    bbox: tuple[float, float, float, float] | None = None
    mask: RleMask | None = None
    keypoints: np.ndarray | None = None
    known_image: bool = True
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ParseError(f"score {self.score} outside [0, 1]")
        if self.keypoints is not None:
            object.__setattr__(
                self, "keypoints", np.asarray(self.keypoints, dtype=float).reshape(-1, 3))


@dataclass(frozen=True)
class PredictionSet:
    predictions: tuple[Prediction, ...]

    def __len__(self):
        return len(self.predictions)

    def of_image(self, image_id: int) -> list[Prediction]:
        return [p for p in self.predictions if p.image_id == image_id]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_IMAGE_KEYS = {"id", "width", "height", "file_name"}
_CAT_KEYS = {"id", "name", "keypoints", "sigmas", "skeleton"}
_ANN_KEYS = {"id", "image_id", "category_id", "bbox", "segmentation",
             "keypoints", "num_keypoints", "iscrowd", "ignore", "area"}


def _load_json(data: bytes):
    try:
        return json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise ParseError("document is not valid UTF-8", e.start) from e
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, e.pos) from e


def _segmentation_to_rle(seg, height, width) -> RleMask:
    if isinstance(seg, dict):
        counts = seg["counts"]
        size = tuple(seg.get("size", (height, width)))
        if isinstance(counts, str):
            return rle_from_coco_string(counts, size)
        return RleMask(size=size, counts=tuple(int(c) for c in counts))
    return polygons_to_rle(seg, height, width)


def parse_annotation_set(data: bytes) -> AnnotationSet:
    """Parse a COCO annotation document."""
    doc = _load_json(data)
    if not isinstance(doc, dict):
        raise ParseError("annotation document must be a JSON object", 0)

    images = []
    for im in doc.get("images", []):
        images.append(ImageInfo(
            id=int(im["id"]), width=int(im["width"]), height=int(im["height"]),
            file_name=im.get("file_name", ""),
            extras={k: v for k, v in im.items() if k not in _IMAGE_KEYS}))
    image_by_id = {im.id: im for im in images}

    categories = []
    for c in doc.get("categories", []):
        names = tuple(c.get("keypoints", ()))
        sigmas = c.get("sigmas")
        if sigmas is None and names == COCO_KEYPOINT_NAMES:
            sigmas = COCO_SIGMAS
        categories.append(Category(
            id=int(c["id"]), name=c.get("name", ""), keypoint_names=names,
            sigmas=tuple(sigmas) if sigmas is not None else None,
            skeleton=tuple(tuple(e) for e in c.get("skeleton", ())),
            extras={k: v for k, v in c.items() if k not in _CAT_KEYS}))

    instances = []
    dangling = []
    for ann in doc.get("annotations", []):
        image_id = int(ann["image_id"])
        img = image_by_id.get(image_id)
        if img is None:
            dangling.append(ann.get("id"))
            continue
        mask = None
        seg = ann.get("segmentation")
        if seg:
            mask = _segmentation_to_rle(seg, img.height, img.width)
        bbox = ann.get("bbox")
        if bbox is None and mask is not None:
            bbox = _mask_bbox(mask)
        area = float(ann.get("area", 0.0))
        if mask is not None:
            if area and abs(mask.area - area) > 1.0:
                logger.warning(
                    "instance %s: stored area %.1f disagrees with mask area %d; "
                    "using mask area", ann.get("id"), area, mask.area)
                area = float(mask.area)
            elif not area:
                area = float(mask.area)
        elif not area and bbox is not None:
            area = float(bbox[2] * bbox[3])
        kp = ann.get("keypoints")
        instances.append(Instance(
            id=int(ann["id"]), image_id=image_id,
            category_id=int(ann.get("category_id", 1)),
            bbox=tuple(float(v) for v in bbox),
            mask=mask,
            keypoints=np.asarray(kp, dtype=float).reshape(-1, 3) if kp else None,
            iscrowd=bool(ann.get("iscrowd", 0)),
            ignore=bool(ann.get("ignore", 0)),
            area=area,
            extras={k: v for k, v in ann.items() if k not in _ANN_KEYS}))
    if dangling:
        raise ReferentialIntegrityError(
            f"annotations reference missing images: {dangling[:20]}", dangling)

    top_extras = {k: v for k, v in doc.items()
                  if k not in ("images", "annotations", "categories")}
    return AnnotationSet(images=tuple(images), instances=tuple(instances),
                         categories=tuple(categories), extras=top_extras)


def _mask_bbox(mask: RleMask) -> tuple[float, float, float, float]:
    m = rle_decode(mask)
    ys, xs = np.nonzero(m)
    if len(xs) == 0:
        return (0.0, 0.0, 1.0, 1.0)
    return (float(xs.min()), float(ys.min()),
            float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def serialize_annotation_set(aset: AnnotationSet) -> bytes:
    """Serialize to a COCO annotation document (masks as compressed strings)."""
    doc = dict(aset.extras)
    doc["images"] = [
        {"id": im.id, "width": im.width, "height": im.height,
         "file_name": im.file_name, **im.extras}
        for im in aset.images]
    doc["categories"] = []
    for c in aset.categories:
        entry = {"id": c.id, "name": c.name, "keypoints": list(c.keypoint_names)}
        if c.sigmas is not None:
            entry["sigmas"] = list(c.sigmas)
        if c.skeleton:
            entry["skeleton"] = [list(e) for e in c.skeleton]
        entry.update(c.extras)
        doc["categories"].append(entry)
    doc["annotations"] = []
    for ins in aset.instances:
        ann = {"id": ins.id, "image_id": ins.image_id,
               "category_id": ins.category_id,
               "bbox": [round(float(v), 4) for v in ins.bbox],
               "area": round(float(ins.area), 4),
               "iscrowd": int(ins.iscrowd)}
        if ins.ignore:
            ann["ignore"] = 1
        if ins.mask is not None:
            ann["segmentation"] = {"size": list(ins.mask.size),
                                   "counts": rle_to_coco_string(ins.mask)}
        if ins.keypoints is not None:
            flat = np.asarray(ins.keypoints, dtype=float)
            flat[:, 2] = np.round(flat[:, 2])
            ann["keypoints"] = [round(float(v), 4) for v in flat.reshape(-1)]
            ann["num_keypoints"] = ins.num_keypoints
        ann.update(ins.extras)
        doc["annotations"].append(ann)
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def parse_prediction_set(data: bytes, known_image_ids=None) -> PredictionSet:
    """Parse a COCO results document (flat scored list)."""
    doc = _load_json(data)
    if not isinstance(doc, list):
        raise ParseError("results document must be a JSON array", 0)
    preds = []
    for i, r in enumerate(doc):
        if "score" not in r:
            raise ParseError(f"result {i} is missing a score")
        score = float(r["score"])
        if not 0.0 <= score <= 1.0:
            raise ParseError(f"result {i}: score {score} outside [0, 1]")
        mask = None
        if r.get("segmentation"):
            seg = r["segmentation"]
            size = tuple(seg["size"])
            mask = (rle_from_coco_string(seg["counts"], size)
                    if isinstance(seg["counts"], str)
                    else RleMask(size=size, counts=tuple(seg["counts"])))
        kp = r.get("keypoints")
        image_id = int(r["image_id"])
        preds.append(Prediction(
            image_id=image_id, score=score,
            category_id=int(r.get("category_id", 1)),
            bbox=tuple(float(v) for v in r["bbox"]) if r.get("bbox") else None,
            mask=mask,
            keypoints=np.asarray(kp, dtype=float).reshape(-1, 3) if kp else None,
            known_image=(known_image_ids is None or image_id in known_image_ids),
            extras={k: v for k, v in r.items()
                    if k not in ("image_id", "category_id", "score", "bbox",
                                 "segmentation", "keypoints")}))
    return PredictionSet(predictions=tuple(preds))


def serialize_prediction_set(pset: PredictionSet) -> bytes:
    out = []
    for p in pset.predictions:
        r = {"image_id": p.image_id, "category_id": p.category_id,
             "score": round(float(p.score), 6)}
        if p.bbox is not None:
            r["bbox"] = [round(float(v), 4) for v in p.bbox]
        if p.mask is not None:
            r["segmentation"] = {"size": list(p.mask.size),
                                 "counts": rle_to_coco_string(p.mask)}
        if p.keypoints is not None:
            r["keypoints"] = [round(float(v), 4)
                              for v in np.asarray(p.keypoints).reshape(-1)]
        r.update(p.extras)
        out.append(r)
    return json.dumps(out, sort_keys=True).encode("utf-8")
