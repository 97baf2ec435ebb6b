"""Heuristic stage implementations.

Deliberately trivial: a connected-component detector over the provided
occupancy raster, a centroid-anchored canonical-skeleton pose, and a
flood-fill segmenter.  They exist to exercise the protocol and the engine's
fault handling, not to be good models.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .rle import decode_mask, encode_mask

# canonical COCO-17 stick figure in a unit box (x, y), y grows downward
_UNIT_SKELETON = np.array([
    [0.50, 0.05],                  # nose
    [0.46, 0.03], [0.54, 0.03],    # eyes
    [0.42, 0.05], [0.58, 0.05],    # ears
    [0.35, 0.20], [0.65, 0.20],    # shoulders
    [0.30, 0.38], [0.70, 0.38],    # elbows
    [0.27, 0.55], [0.73, 0.55],    # wrists
    [0.40, 0.55], [0.60, 0.55],    # hips
    [0.40, 0.75], [0.60, 0.75],    # knees
    [0.40, 0.95], [0.60, 0.95],    # ankles
])


def _components(mask: np.ndarray):
    """4-connected components of a boolean array, in scan order."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    out = []
    for y0, x0 in zip(*np.nonzero(mask)):
        if seen[y0, x0]:
            continue
        comp = np.zeros_like(mask, dtype=bool)
        queue = deque([(int(y0), int(x0))])
        seen[y0, x0] = True
        while queue:
            y, x = queue.popleft()
            comp[y, x] = True
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] \
                        and not seen[ny, nx]:
                    seen[ny, nx] = True
                    queue.append((ny, nx))
        out.append(comp)
    return out


def detect(payload: dict) -> dict:
    """Connected components of occupancy minus the blackout raster."""
    scene = payload["scene"]
    h, w = int(scene["height"]), int(scene["width"])
    occ_obj = payload.get("occupancy")
    occ = decode_mask(occ_obj) if occ_obj else np.zeros((h, w), dtype=bool)
    raster_obj = payload.get("raster")
    if raster_obj:
        occ = occ & ~decode_mask(raster_obj)
    total = max(int(occ.sum()), 1)
    detections = []
    for comp in _components(occ):
        area = int(comp.sum())
        if area < 4:
            continue  # speckles
        ys, xs = np.nonzero(comp)
        bbox = [float(xs.min()), float(ys.min()),
                float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1)]
        score = round(min(1.0, 0.5 + 0.5 * area / total), 9)
        detections.append({"bbox": bbox, "score": score,
                           "mask": encode_mask(comp)})
    detections.sort(key=lambda d: (-d["score"], d["bbox"]))
    return {"detections": detections}


def estimate_pose(payload: dict) -> dict:
    """Canonical skeleton scaled into the prompt region's bounding box."""
    scene = payload["scene"]
    h, w = int(scene["height"]), int(scene["width"])
    mask_obj = payload.get("mask")
    if mask_obj:
        m = decode_mask(mask_obj)
        ys, xs = np.nonzero(m)
        if len(xs):
            x0, y0 = float(xs.min()), float(ys.min())
            bw = float(xs.max() - xs.min() + 1)
            bh = float(ys.max() - ys.min() + 1)
        else:
            x0, y0, bw, bh = (float(v) for v in payload["bbox"])
    else:
        x0, y0, bw, bh = (float(v) for v in payload["bbox"])
    kp = _UNIT_SKELETON * np.array([bw, bh]) + np.array([x0, y0])
    in_image = ((kp[:, 0] >= 0) & (kp[:, 0] < w)
                & (kp[:, 1] >= 0) & (kp[:, 1] < h))
    rnd = lambda a: [round(float(v), 9) for v in a]
    return {"keypoints": [[round(float(x), 9), round(float(y), 9)]
                          for x, y in kp],
            "presence": rnd(np.where(in_image, 0.9, 0.05)),
            "visibility": rnd(np.full(17, 0.8)),
            "expected_oks": rnd(np.full(17, 0.5)),
            "confidence": rnd(np.full(17, 0.5))}


def refine_mask(payload: dict) -> dict:
    """Flood fill from positive prompts over the prior mask; discs without
    a prior."""
    scene = payload["scene"]
    h, w = int(scene["height"]), int(scene["width"])
    prompts = payload.get("prompts") or []
    positive = [(float(x), float(y)) for x, y, lbl in prompts if int(lbl) == 1]
    out = np.zeros((h, w), dtype=bool)
    prior_obj = payload.get("prior_mask")
    if prior_obj:
        prior = decode_mask(prior_obj)
        comps = _components(prior)
        for x, y in positive:
            xi, yi = int(x), int(y)
            if not (0 <= xi < w and 0 <= yi < h):
                continue
            for comp in comps:
                if comp[yi, xi]:
                    out |= comp
                    break
    else:
        radius = max(2, int(0.04 * min(h, w)))
        yy, xx = np.mgrid[0:h, 0:w]
        for x, y in positive:
            out |= (xx - x) ** 2 + (yy - y) ** 2 <= radius ** 2
    return {"mask": encode_mask(out)}


HEURISTICS = {"detector": detect, "pose": estimate_pose,
              "segmenter": refine_mask}
