"""COCO-style evaluation: OKS, greedy matching, AP/AR sweeps, matching log.

The protocol constants (thresholds 0.50:0.05:0.95, 101 recall points,
maxDets 20 for keypoints / 100 for boxes and masks, area ranges) follow the
reference COCO tooling so results are comparable with published numbers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import geometry
from .coco_io import AnnotationSet, Instance, PredictionSet

THRESHOLDS = tuple(np.round(np.arange(0.50, 0.99, 0.05), 2))
RECALL_POINTS = tuple(np.round(np.linspace(0.0, 1.0, 101), 2))


class SimilarityKind(str, Enum):
    BboxIoU = "bbox"
    MaskIoU = "segm"
    Oks = "keypoints"


class UndefinedSimilarityError(ValueError):
    """OKS against a ground truth with zero labeled keypoints."""


class UndefinedEvaluationError(ValueError):
    """No ground-truth instances in scope; AP is undefined, not zero."""


def oks(pred_keypoints, gt: Instance, sigmas) -> float:
    """Object keypoint similarity of predicted locations against a GT instance.

    Mean over labeled GT keypoints of exp(-d^2 / (2 * s^2 * k^2)) with
    s^2 the GT area and k = 2 * sigma.
    """
    gkp = np.asarray(gt.keypoints, dtype=float).reshape(-1, 3)
    labeled = gkp[:, 2] > 0
    if not labeled.any():
        raise UndefinedSimilarityError(f"gt {gt.id} has no labeled keypoints")
    pkp = np.asarray(pred_keypoints, dtype=float).reshape(-1, 3)
    sig = np.asarray(sigmas, dtype=float)
    if len(sig) != len(gkp):
        raise ValueError(f"sigma count {len(sig)} != keypoint count {len(gkp)}")
    d2 = (pkp[:, 0] - gkp[:, 0]) ** 2 + (pkp[:, 1] - gkp[:, 1]) ** 2
    k2 = (2.0 * sig) ** 2
    s2 = max(float(gt.area), 1e-9)
    e = d2 / (2.0 * s2 * k2)
    return float(np.mean(np.exp(-e[labeled])))


def similarity_matrix(preds, gts, kind: SimilarityKind, sigmas=None) -> np.ndarray:
    """(n_preds, n_gts) similarity values; crowd GT gets containment IoU."""
    out = np.zeros((len(preds), len(gts)))
    for j, g in enumerate(gts):
        for i, p in enumerate(preds):
            if kind is SimilarityKind.Oks:
                out[i, j] = oks(p.keypoints, g, sigmas)
            elif kind is SimilarityKind.MaskIoU:
                out[i, j] = geometry.mask_iou(p.mask, g.mask, g.iscrowd)
            else:
                out[i, j] = geometry.bbox_iou(p.bbox, g.bbox)
    return out


@dataclass
class MatchRecord:
    """One prediction's fate at one threshold."""
    image_id: int
    threshold: float
    score: float
    gt_id: int | None          # matched GT, or None for a false positive
    similarity: float
    gt_ignored: bool           # matched an ignore/crowd GT (excluded from PR)
    pred_ignored: bool


def match_greedy(preds, gts, threshold: float, sim: np.ndarray,
                 gt_ignore_flags) -> list[int]:
    """Greedy confidence-order matching, mirroring the reference protocol.

    ``preds`` must already be sorted by descending score.  Returns for each
    prediction the matched GT index or -1.  Non-ignore GTs must precede
    ignore GTs in ``gts``.
    """
    n_gt = len(gts)
    gt_taken = [False] * n_gt
    matches = [-1] * len(preds)
    for i in range(len(preds)):
        best = -1
        best_sim = min(threshold, 1 - 1e-10)
        for j in range(n_gt):
            if gt_taken[j] and not gts[j].iscrowd:
                continue
            # once we reach ignore GTs with a real match in hand, stop
            if best > -1 and not gt_ignore_flags[best] and gt_ignore_flags[j]:
                break
            if sim[i, j] < best_sim:
                continue
            best_sim = sim[i, j]
            best = j
        if best > -1:
            matches[i] = best
            gt_taken[best] = True
    return matches


@dataclass
class EvalReport:
    task: SimilarityKind
    ap: float
    ap50: float
    ap75: float
    ar: float
    per_threshold_ap: np.ndarray          # (10,)
    precision: np.ndarray                 # (10, 101)
    recall: np.ndarray                    # (10,)
    n_images: int
    n_gts: int
    n_preds: int
    iou_mode: str = ""
    matching_log: list[MatchRecord] = field(default_factory=list)
    undefined: bool = False

    def summary_dict(self) -> dict:
        return {"task": self.task.value, "ap": round(self.ap, 6),
                "ap50": round(self.ap50, 6), "ap75": round(self.ap75, 6),
                "ar": round(self.ar, 6), "n_images": self.n_images,
                "n_gts": self.n_gts, "n_preds": self.n_preds,
                "iou_mode": self.iou_mode, "undefined": self.undefined}

    def write(self, json_path, csv_path=None, log_path=None):
        with open(json_path, "w") as f:
            json.dump(self.summary_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        if csv_path:
            with open(csv_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["threshold", "ap", "recall"])
                for t, a, r in zip(THRESHOLDS, self.per_threshold_ap, self.recall):
                    w.writerow([f"{t:.2f}", f"{a:.6f}", f"{r:.6f}"])
        if log_path:
            with open(log_path, "w") as f:
                for m in self.matching_log:
                    f.write(json.dumps({
                        "image_id": m.image_id, "threshold": m.threshold,
                        "score": round(m.score, 6),
                        "gt_id": m.gt_id, "similarity": round(m.similarity, 6),
                        "gt_ignored": m.gt_ignored,
                        "pred_ignored": m.pred_ignored}, sort_keys=True) + "\n")


@dataclass(frozen=True)
class EvalOptions:
    max_dets: int | None = None        # default per task
    area_range: tuple[float, float] = (0.0, 1e10)
    category_id: int | None = None
    keep_matching_log: bool = True


def _default_max_dets(task: SimilarityKind) -> int:
    return 20 if task is SimilarityKind.Oks else 100


def _gt_is_ignored(g: Instance, task: SimilarityKind, area_range) -> bool:
    if g.ignore or g.iscrowd:
        return True
    if task is SimilarityKind.Oks and g.num_keypoints == 0:
        return True
    if not (area_range[0] <= g.area < area_range[1]):
        return True
    return False


def evaluate(preds: PredictionSet, gts: AnnotationSet, task: SimilarityKind,
             options: EvalOptions = EvalOptions()) -> EvalReport:
    """Full evaluation: per-image greedy matching plus AP/AR accumulation."""
    sigmas = None
    if task is SimilarityKind.Oks:
        cats = [c for c in gts.categories
                if options.category_id is None or c.id == options.category_id]
        if not cats or cats[0].sigmas is None:
            raise ValueError("keypoint evaluation requires category sigmas")
        sigmas = cats[0].sigmas
    max_dets = options.max_dets or _default_max_dets(task)

    payload = {SimilarityKind.BboxIoU: "bbox", SimilarityKind.MaskIoU: "mask",
               SimilarityKind.Oks: "keypoints"}[task]

    image_ids = [im.id for im in gts.images]
    all_scores: list[float] = []
    # per threshold: parallel tp/fp flags per counted prediction
    tps: list[list[bool]] = [[] for _ in THRESHOLDS]
    fps: list[list[bool]] = [[] for _ in THRESHOLDS]
    n_gt_counted = 0
    log: list[MatchRecord] = []

    for image_id in image_ids:
        img_gts = [g for g in gts.instances if g.image_id == image_id
                   and (options.category_id is None
                        or g.category_id == options.category_id)]
        # instances without the task payload are out of scope for it
        if task is SimilarityKind.MaskIoU:
            img_gts = [g for g in img_gts if g.mask is not None]
        elif task is SimilarityKind.Oks:
            img_gts = [g for g in img_gts if g.keypoints is not None]
        img_preds = [p for p in preds.of_image(image_id)
                     if getattr(p, payload) is not None
                     and (options.category_id is None
                          or p.category_id == options.category_id)]
        # stable sort: ties keep input order
        img_preds.sort(key=lambda p: -p.score)
        img_preds = img_preds[:max_dets]

        ignore_flags = [_gt_is_ignored(g, task, options.area_range) for g in img_gts]
        order = sorted(range(len(img_gts)), key=lambda j: ignore_flags[j])
        img_gts = [img_gts[j] for j in order]
        ignore_flags = [ignore_flags[j] for j in order]
        n_gt_counted += sum(1 for f in ignore_flags if not f)

        if not img_preds:
            continue
        if task is SimilarityKind.Oks:
            usable = [g.num_keypoints > 0 for g in img_gts]
        else:
            usable = [True] * len(img_gts)
        sim = np.zeros((len(img_preds), len(img_gts)))
        for j, g in enumerate(img_gts):
            if not usable[j]:
                continue
            for i, p in enumerate(img_preds):
                if task is SimilarityKind.Oks:
                    sim[i, j] = oks(p.keypoints, g, sigmas)
                elif task is SimilarityKind.MaskIoU:
                    sim[i, j] = geometry.mask_iou(p.mask, g.mask, g.iscrowd)
                else:
                    sim[i, j] = geometry.bbox_iou(p.bbox, g.bbox)

        for t_idx, thr in enumerate(THRESHOLDS):
            matches = match_greedy(img_preds, img_gts, thr, sim, ignore_flags)
            for i, p in enumerate(img_preds):
                j = matches[i]
                pred_area = _pred_area(p, task)
                out_of_range = not (options.area_range[0] <= pred_area
                                    < options.area_range[1])
                if j >= 0:
                    pred_ignored = ignore_flags[j]
                else:
                    pred_ignored = out_of_range
                if t_idx == 0:
                    all_scores.append(p.score)
                if not pred_ignored:
                    tps[t_idx].append(j >= 0)
                    fps[t_idx].append(j < 0)
                else:
                    tps[t_idx].append(False)
                    fps[t_idx].append(False)
                if options.keep_matching_log:
                    log.append(MatchRecord(
                        image_id=image_id, threshold=float(thr), score=p.score,
                        gt_id=img_gts[j].id if j >= 0 else None,
                        similarity=float(sim[i, j]) if j >= 0 else 0.0,
                        gt_ignored=bool(j >= 0 and ignore_flags[j]),
                        pred_ignored=bool(pred_ignored)))

    # predictions referencing unknown images are scored as unmatched
    known = set(image_ids)
    for p in preds.predictions:
        if p.image_id in known or getattr(p, payload) is None:
            continue
        all_scores.append(p.score)
        for t_idx, thr in enumerate(THRESHOLDS):
            tps[t_idx].append(False)
            fps[t_idx].append(True)
            if options.keep_matching_log:
                log.append(MatchRecord(
                    image_id=p.image_id, threshold=float(thr), score=p.score,
                    gt_id=None, similarity=0.0, gt_ignored=False,
                    pred_ignored=False))

    report = _accumulate(all_scores, tps, fps, n_gt_counted, task)
    report.n_images = len(image_ids)
    report.n_preds = len(preds.predictions)
    report.matching_log = log
    return report


def _pred_area(p, task: SimilarityKind) -> float:
    if task is SimilarityKind.MaskIoU and p.mask is not None:
        return float(p.mask.area)
    if p.bbox is not None:
        return float(p.bbox[2] * p.bbox[3])
    return 0.0


def _accumulate(scores, tps, fps, n_gt, task) -> EvalReport:
    """Global PR accumulation with 101-point interpolated precision."""
    if n_gt == 0:
        return EvalReport(task=task, ap=float("nan"), ap50=float("nan"),
                          ap75=float("nan"), ar=float("nan"),
                          per_threshold_ap=np.full(len(THRESHOLDS), np.nan),
                          precision=np.zeros((len(THRESHOLDS), len(RECALL_POINTS))),
                          recall=np.zeros(len(THRESHOLDS)),
                          n_images=0, n_gts=0, n_preds=0, undefined=True)
    order = np.argsort(-np.asarray(scores), kind="stable") if scores else []
    per_t_ap = np.zeros(len(THRESHOLDS))
    precision = np.zeros((len(THRESHOLDS), len(RECALL_POINTS)))
    recall = np.zeros(len(THRESHOLDS))
    rec_grid = np.asarray(RECALL_POINTS)
    for t in range(len(THRESHOLDS)):
        tp = np.asarray(tps[t], dtype=float)[order] if len(order) else np.empty(0)
        fp = np.asarray(fps[t], dtype=float)[order] if len(order) else np.empty(0)
        ctp = np.cumsum(tp)
        cfp = np.cumsum(fp)
        rc = ctp / n_gt
        pr = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
        recall[t] = rc[-1] if len(rc) else 0.0
        # make precision monotonically non-increasing from the right
        for i in range(len(pr) - 1, 0, -1):
            if pr[i] > pr[i - 1]:
                pr[i - 1] = pr[i]
        idx = np.searchsorted(rc, rec_grid, side="left")
        q = np.zeros(len(rec_grid))
        valid = idx < len(pr)
        q[valid] = pr[idx[valid]]
        precision[t] = q
        per_t_ap[t] = q.mean()
    ap = float(per_t_ap.mean())
    return EvalReport(task=task, ap=ap,
                      ap50=float(per_t_ap[0]), ap75=float(per_t_ap[5]),
                      ar=float(recall.mean()),
                      per_threshold_ap=per_t_ap, precision=precision,
                      recall=recall, n_images=0, n_gts=n_gt, n_preds=0)


def pose_score(pose, presence_cutoff: float = 0.5) -> float:
    """Instance confidence: mean expected OKS over present keypoints."""
    pp = np.asarray(pose.presence, dtype=float)
    eoks = np.asarray(pose.expected_oks, dtype=float)
    present = pp >= presence_cutoff
    if not present.any():
        return 0.0
    return float(eoks[present].mean())


def annotations_as_predictions(gts: AnnotationSet, score: float = 1.0) -> PredictionSet:
    """Feed GT back as predictions (self-evaluation fixture)."""
    from .coco_io import Prediction
    preds = []
    for g in gts.instances:
        if g.ignore or g.iscrowd:
            continue
        preds.append(Prediction(
            image_id=g.image_id, score=score, category_id=g.category_id,
            bbox=g.bbox, mask=g.mask,
            keypoints=None if g.keypoints is None else np.array(g.keypoints)))
    return PredictionSet(predictions=tuple(preds))
