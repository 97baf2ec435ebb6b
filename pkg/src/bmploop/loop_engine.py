"""The mutual-conditioning state machine.

Detector passes over a progressively blacked-out scene, mask-conditioned pose
estimation, pose-prompted mask refinement, pose-level NMS, an optional extra
pose pass over refined masks ("plus" mode) with a convergence criterion, and
the 2D-to-3D prompting hand-off.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .coco_io import COCO_SIGMAS, RleMask, rle_decode
from .evaluator import pose_score
from .geometry import BlackoutRaster, blackout_apply, mask_from_bbox, visible_fraction
from .model_stages import Detection, PosePrediction, StageError, StageSet


class PromptPolicy(str, Enum):
    Visibility = "visibility"
    Presence = "presence"
    ExpectedOks = "expected_oks"
    Confidence = "confidence"


class NoPromptError(StageError):
    """No keypoint is eligible as a prompt; caller falls back to bbox center."""


@dataclass(frozen=True)
class StageConfig:
    detector_score_threshold: float = 0.3
    prompt_policy: PromptPolicy = PromptPolicy.Visibility
    prompt_k: int = 3
    mask_alpha: float = 0.25
    presence_cutoff: float = 0.5
    pose_nms_oks_threshold: float = 0.9
    max_detector_passes: int = 2
    plus_mode: bool = False
    max_pose_iterations: int = 1     # extra pose passes in plus mode
    full_alternation: bool = False   # also re-run mask refinement in plus mode
    convergence_tol: float = 0.01
    min_visible_fraction: float = 0.05

    def __post_init__(self):
        if self.prompt_k < 1:
            raise ValueError("prompt_k must be >= 1")
        for name in ("detector_score_threshold", "mask_alpha", "presence_cutoff",
                     "pose_nms_oks_threshold", "min_visible_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class TraceRecord:
    pass_index: int
    stage: str
    instance_id: int
    input_digest: str
    output_digest: str
    wall_ms: float = 0.0

    def to_json(self, include_wall_time: bool = True) -> str:
        d = {"pass": self.pass_index, "stage": self.stage,
             "instance_id": self.instance_id, "input_digest": self.input_digest,
             "output_digest": self.output_digest}
        if include_wall_time:
            d["wall_ms"] = round(self.wall_ms, 3)
        return json.dumps(d, sort_keys=True)


@dataclass
class LoopInstance:
    instance_id: int
    detection: Detection
    pose: PosePrediction | None
    mask: RleMask | None
    score: float
    failed: bool = False
    failure: str = ""
    prompt_fallback: bool = False
    history: list = field(default_factory=list)

    @property
    def bbox(self):
        if self.mask is not None and self.mask.area > 0:
            m = rle_decode(self.mask)
            ys, xs = np.nonzero(m)
            return (float(xs.min()), float(ys.min()),
                    float(xs.max() - xs.min() + 1),
                    float(ys.max() - ys.min() + 1))
        return self.detection.bbox


@dataclass
class Lifted3D:
    instance_id: int
    keypoints_3d: np.ndarray
    reprojection: np.ndarray
    score: float


@dataclass
class LoopResult:
    scene_id: int
    instances: list[LoopInstance]
    raster: BlackoutRaster
    trace: list[TraceRecord]
    lifted: list[Lifted3D] = field(default_factory=list)
    lifter_skipped: bool = False

    def kept(self) -> list[LoopInstance]:
        return [i for i in self.instances if not i.failed]

    def digest(self) -> str:
        """Content digest over the trace, excluding wall times."""
        h = hashlib.blake2b(digest_size=16)
        for rec in self.trace:
            h.update(rec.to_json(include_wall_time=False).encode())
        return h.hexdigest()

    def write_trace(self, path):
        with open(path, "w") as f:
            for rec in self.trace:
                f.write(rec.to_json() + "\n")


def _round6(obj):
    """Round floats recursively so digests survive wire-level rounding.

    Values cross the wire rounded to 9 decimals; rounding 9-then-6 here makes
    the digest identical whether a stage ran in-process or remotely.
    """
    if isinstance(obj, float):
        return round(round(obj, 9), 6)
    if isinstance(obj, (list, tuple)):
        return tuple(_round6(v) for v in obj)
    return obj


def _digest(*parts) -> str:
    h = hashlib.blake2b(digest_size=12)
    for p in parts:
        if isinstance(p, np.ndarray):
            arr = np.ascontiguousarray(p, dtype=float)
            flat = tuple(_round6(float(v)) for v in arr.reshape(-1))
            h.update(repr((arr.shape, flat)).encode())
        else:
            h.update(repr(_round6(p)).encode())
    return h.hexdigest()


def _pose_digest(pose: PosePrediction) -> str:
    return _digest(pose.keypoints, pose.presence, pose.visibility,
                   pose.expected_oks, pose.confidence)


def select_prompts(pose: PosePrediction, policy: PromptPolicy, k: int,
                   presence_cutoff: float, image_size) -> list[tuple[float, float, int]]:
    """Top-k in-image, present keypoints by the policy metric.

    Ties break on keypoint index; raises NoPromptError when nothing is
    eligible.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    h, w = image_size
    metric = {PromptPolicy.Visibility: pose.visibility,
              PromptPolicy.Presence: pose.presence,
              PromptPolicy.ExpectedOks: pose.expected_oks,
              PromptPolicy.Confidence: pose.confidence}[policy]
    eligible = [i for i in range(len(pose.keypoints))
                if pose.presence[i] >= presence_cutoff
                and 0 <= pose.keypoints[i, 0] < w
                and 0 <= pose.keypoints[i, 1] < h]
    if not eligible:
        raise NoPromptError("no in-image keypoint passes the presence cutoff")
    eligible.sort(key=lambda i: (-metric[i], i))
    return [(float(pose.keypoints[i, 0]), float(pose.keypoints[i, 1]), 1)
            for i in eligible[:k]]


def sample_training_prompts(gt_mask: np.ndarray, current_pred_mask,
                            pose: PosePrediction, rng: np.random.Generator):
    """Training-time prompt sampling for pose-guided segmenters.

    First call (no prediction yet) returns the most visible keypoint.  Later
    calls return a keypoint inside the error region, or a random error-region
    pixel when none is.  Returns None once prediction matches ground truth.
    """
    gt = np.asarray(gt_mask, dtype=bool)
    if current_pred_mask is None:
        i = int(np.argmax(pose.visibility))
        x, y = pose.keypoints[i]
        return (float(x), float(y), 1)
    err = gt ^ np.asarray(current_pred_mask, dtype=bool)
    if not err.any():
        return None  # refinement complete
    h, w = gt.shape
    for i in np.argsort(-pose.visibility, kind="stable"):
        x, y = pose.keypoints[i]
        xi, yi = int(x), int(y)
        if 0 <= xi < w and 0 <= yi < h and err[yi, xi]:
            label = 1 if gt[yi, xi] else 0
            return (float(x), float(y), label)
    ys, xs = np.nonzero(err)
    j = int(rng.integers(len(xs)))
    return (float(xs[j]) + 0.5, float(ys[j]) + 0.5, 1 if gt[ys[j], xs[j]] else 0)


def _pose_pair_oks(a: PosePrediction, b: PosePrediction, area: float,
                   sigmas=COCO_SIGMAS) -> float:
    d2 = ((a.keypoints - b.keypoints) ** 2).sum(axis=1)
    k2 = (2.0 * np.asarray(sigmas)) ** 2
    return float(np.mean(np.exp(-d2 / (2.0 * max(area, 1e-9) * k2))))


def pose_nms(items, oks_threshold: float) -> list[int]:
    """Greedy score-descending suppression over (pose, score, area) triples.

    Returns indices of kept items in the original order.
    """
    order = sorted(range(len(items)), key=lambda i: (-items[i][1], i))
    kept: list[int] = []
    for i in order:
        pose_i, _, area_i = items[i]
        dup = any(
            _pose_pair_oks(pose_i, items[j][0], max(area_i, items[j][2]))
            >= oks_threshold
            for j in kept)
        if not dup:
            kept.append(i)
    return sorted(kept)


def converged(prev: LoopResult, curr: LoopResult, tol: float) -> bool:
    """Instance count unchanged and matched poses agree to OKS >= 1 - tol."""
    prev_k, curr_k = prev.kept(), curr.kept()
    if len(prev_k) != len(curr_k):
        return False
    if not curr_k:
        return True
    # greedy correspondence by OKS, highest pair first
    pairs = []
    for i, a in enumerate(prev_k):
        for j, b in enumerate(curr_k):
            if a.pose is None or b.pose is None:
                continue
            area = max(a.mask.area if a.mask else 1.0,
                       b.mask.area if b.mask else 1.0)
            pairs.append((_pose_pair_oks(a.pose, b.pose, area), i, j))
    pairs.sort(key=lambda t: -t[0])
    used_i, used_j, sims = set(), set(), []
    for s, i, j in pairs:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        sims.append(s)
    if len(sims) < len(curr_k):
        return False
    return float(np.mean(sims)) >= 1.0 - tol


def run_loop(scene, stages: StageSet, cfg: StageConfig) -> LoopResult:
    """Execute the full mutual-conditioning loop over one scene."""
    shape = (scene.height, scene.width)
    raster = BlackoutRaster(size=shape)
    instances: list[LoopInstance] = []
    trace: list[TraceRecord] = []
    next_id = 1

    def record(pass_idx, stage, inst_id, in_digest, out_digest, t0):
        trace.append(TraceRecord(pass_index=pass_idx, stage=stage,
                                 instance_id=inst_id, input_digest=in_digest,
                                 output_digest=out_digest,
                                 wall_ms=(time.perf_counter() - t0) * 1e3))

    for pass_idx in range(1, cfg.max_detector_passes + 1):
        t0 = time.perf_counter()
        in_dig = _digest(scene.id, pass_idx,
                         raster.mask.counts if raster.mask else None)
        try:
            detections = stages.detector.detect(scene, raster)
        except StageError:
            record(pass_idx, "detector", 0, in_dig, "stage-error", t0)
            continue
        detections = sorted(detections, key=lambda d: -d.score)
        record(pass_idx, "detector", 0, in_dig,
               _digest([(d.bbox, round(d.score, 9)) for d in detections]), t0)

        for det in detections:
            if det.score < cfg.detector_score_threshold:
                continue
            det_mask = det.mask if det.mask is not None else mask_from_bbox(
                det.bbox, shape)
            if det_mask.area == 0:
                continue
            if visible_fraction(det_mask, raster) < cfg.min_visible_fraction:
                continue
            inst_id = next_id
            next_id += 1
            inst = LoopInstance(instance_id=inst_id, detection=det,
                                pose=None, mask=None, score=0.0)
            instances.append(inst)
            try:
                t0 = time.perf_counter()
                pose = stages.pose_estimator.estimate_pose(
                    scene, det.bbox, det.mask, cfg.mask_alpha)
                record(pass_idx, "pose", inst_id,
                       _digest(det.bbox, det.mask.counts if det.mask else None),
                       _pose_digest(pose), t0)
                try:
                    prompts = select_prompts(pose, cfg.prompt_policy,
                                             cfg.prompt_k, cfg.presence_cutoff,
                                             shape)
                except NoPromptError:
                    x, y, w, h = det.bbox
                    prompts = [(x + w / 2.0, y + h / 2.0, 1)]
                    inst.prompt_fallback = True
                t0 = time.perf_counter()
                refined = stages.mask_refiner.refine_mask(scene, prompts,
                                                          det.mask)
                record(pass_idx, "segmenter", inst_id, _digest(prompts),
                       _digest(refined.counts), t0)
                if refined.area == 0:
                    inst.history.append("empty-mask-fallback")
                    refined = det_mask
                inst.pose = pose
                inst.mask = refined
                inst.score = pose_score(pose, cfg.presence_cutoff)
                raster = blackout_apply(raster, refined)
            except StageError as e:
                inst.failed = True
                inst.failure = str(e)
                record(pass_idx, "failure", inst_id, _digest(det.bbox),
                       "stage-error", time.perf_counter())

    if cfg.plus_mode:
        for it in range(cfg.max_pose_iterations):
            prev_instances = [replace(i, history=list(i.history))
                              for i in instances]
            for inst in instances:
                if inst.failed or inst.mask is None:
                    continue
                try:
                    t0 = time.perf_counter()
                    pose = stages.pose_estimator.estimate_pose(
                        scene, inst.bbox, inst.mask, cfg.mask_alpha)
                    record(100 + it, "pose+", inst.instance_id,
                           _digest(inst.bbox, inst.mask.counts),
                           _pose_digest(pose), t0)
                    inst.history.append("pose-refined")
                    inst.pose = pose
                    inst.score = pose_score(pose, cfg.presence_cutoff)
                    if cfg.full_alternation:
                        prompts = select_prompts(pose, cfg.prompt_policy,
                                                 cfg.prompt_k,
                                                 cfg.presence_cutoff, shape)
                        refined = stages.mask_refiner.refine_mask(
                            scene, prompts, inst.mask)
                        if refined.area > 0:
                            inst.mask = refined
                            raster = blackout_apply(raster, refined)
                except StageError as e:
                    inst.failed = True
                    inst.failure = str(e)
            curr = LoopResult(scene_id=scene.id, instances=instances,
                              raster=raster, trace=[])
            prev = LoopResult(scene_id=scene.id, instances=prev_instances,
                              raster=raster, trace=[])
            if converged(prev, curr, cfg.convergence_tol):
                break

    # final pose-level NMS
    live = [i for i in instances if not i.failed and i.pose is not None]
    items = [(i.pose, i.score,
              float(i.mask.area) if i.mask else i.detection.bbox[2] * i.detection.bbox[3])
             for i in live]
    kept_idx = set(pose_nms(items, cfg.pose_nms_oks_threshold))
    for n, inst in enumerate(live):
        if n not in kept_idx:
            inst.failed = True
            inst.failure = "suppressed-by-pose-nms"
    trace.append(TraceRecord(
        pass_index=999, stage="pose_nms", instance_id=0,
        input_digest=_digest([i.instance_id for i in live]),
        output_digest=_digest(sorted(live[n].instance_id for n in kept_idx))))

    result = LoopResult(scene_id=scene.id, instances=instances, raster=raster,
                        trace=trace)
    if stages.lifter_3d is not None:
        run_3d_handoff(result, stages.lifter_3d, cfg, scene)
    else:
        result.lifter_skipped = True
    return result


def run_3d_handoff(result: LoopResult, lifter, cfg: StageConfig, scene,
                   use_masks: bool = True) -> list[Lifted3D]:
    """Lift surviving instances to 3D after loop termination, then apply
    3D NMS on reprojected keypoints with inherited 2D scores."""
    if lifter is None:
        result.lifter_skipped = True
        return []
    lifter.encode_scene(scene)
    lifted: list[Lifted3D] = []
    for inst in result.kept():
        try:
            t0 = time.perf_counter()
            kp3d, reproj = lifter.lift_3d(scene, inst.bbox,
                                          inst.mask if use_masks else None)
            result.trace.append(TraceRecord(
                pass_index=1000, stage="lifter", instance_id=inst.instance_id,
                input_digest=_digest(inst.bbox,
                                     inst.mask.counts if (use_masks and inst.mask) else None),
                output_digest=_digest(kp3d),
                wall_ms=(time.perf_counter() - t0) * 1e3))
            lifted.append(Lifted3D(instance_id=inst.instance_id,
                                   keypoints_3d=kp3d, reprojection=reproj,
                                   score=inst.score))
        except StageError:
            continue
    # 3D NMS on the reprojection plane, scores inherited from 2D
    proxies = []
    for lf in lifted:
        pose = PosePrediction(keypoints=lf.reprojection,
                              presence=np.ones(17), visibility=np.ones(17),
                              expected_oks=np.ones(17), confidence=np.ones(17))
        area = ((np.ptp(lf.reprojection[:, 0]) + 1)
                * (np.ptp(lf.reprojection[:, 1]) + 1))
        proxies.append((pose, lf.score, float(area)))
    kept = pose_nms(proxies, cfg.pose_nms_oks_threshold)
    lifted = [lifted[i] for i in kept]
    result.lifted = lifted
    result.lifter_skipped = False
    return lifted
