"""Stage interfaces, seeded oracle stages with a declarative corruption
model, and the wire-protocol adapter for external stage processes.

Oracle stages are pure functions of (scene, inputs, seed): identical inputs
always produce identical outputs, which is what makes the simulation claims
replayable.
"""

from __future__ import annotations

import hashlib
import json
import socket
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .coco_io import RleMask, rle_decode, rle_encode, rle_from_coco_string, rle_to_coco_string
from .geometry import BlackoutRaster, bbox_iou, mask_from_bbox

PROTOCOL_VERSION = 1
STAGE_KINDS = ("detector", "pose", "segmenter", "lifter")


class StageError(RuntimeError):
    """A stage failed for one call; the engine fault-isolates the instance."""


class ProtocolError(StageError):
    """Wire-protocol violation: bad frame, version mismatch, invalid payload."""


@dataclass(frozen=True)
class Detection:
    bbox: tuple[float, float, float, float]
    score: float
    mask: RleMask | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise StageError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class PosePrediction:
    keypoints: np.ndarray      # (17, 2) pixel locations, may leave the image
    presence: np.ndarray       # (17,) in [0, 1]
    visibility: np.ndarray     # (17,) in [0, 1]
    expected_oks: np.ndarray   # (17,) in [0, 1]
    confidence: np.ndarray     # (17,) in [0, 1], generic per-keypoint score

    def __post_init__(self):
        for name in ("presence", "visibility", "expected_oks", "confidence"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise StageError(f"{name} outside [0, 1]")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "keypoints",
                           np.asarray(self.keypoints, dtype=float).reshape(-1, 2))


@dataclass(frozen=True)
class StageSet:
    detector: object
    pose_estimator: object
    mask_refiner: object
    lifter_3d: object | None = None


@dataclass(frozen=True)
class CorruptionProfile:
    """Named failure-mode knobs; zero everywhere means perfect oracles."""

    merge_iou_threshold: float = 1.1     # >1 disables detector collapse
    miss_rate: float = 0.0               # chance of missing a small instance
    keypoint_noise_sigma: float = 0.0    # stdev as fraction of body height
    mask_noise_reduction: float = 0.9    # how much a perfect mask cuts noise
    merge_swap_rate: float = 0.0         # maskless pose: wrong-person keypoints
    oversegmentation: bool = False       # segmenter returns only touched parts
    metric_noise: float = 0.0            # noise on presence/E_OKS signals
    confidence_noise: float = 0.0        # extra noise on generic confidence
    noise_3d_with_mask: float = 0.0      # 3D noise as fraction of body height
    noise_3d_without_mask: float = 0.0

    @staticmethod
    def perfect() -> "CorruptionProfile":
        return CorruptionProfile()

    @staticmethod
    def standard() -> "CorruptionProfile":
        """Calibrated profile used by the simulation properties."""
        return CorruptionProfile(
            merge_iou_threshold=0.25,
            miss_rate=0.0,
            keypoint_noise_sigma=0.055,
            mask_noise_reduction=0.9,
            merge_swap_rate=0.35,
            oversegmentation=False,
            metric_noise=0.25,
            confidence_noise=0.35,
            noise_3d_with_mask=0.012,
            noise_3d_without_mask=0.03,
        )


def _rng(seed: int, *parts) -> np.random.Generator:
    h = hashlib.blake2b(digest_size=8)
    h.update(repr((seed,) + parts).encode())
    return np.random.default_rng(int.from_bytes(h.digest(), "big"))


def _raster_key(raster: BlackoutRaster):
    return None if raster.mask is None else raster.mask.counts


def _visible_fraction_arr(mask: np.ndarray, raster_arr: np.ndarray) -> float:
    area = int(mask.sum())
    if area == 0:
        return 0.0
    return float((mask & ~raster_arr).sum()) / area


class OracleDetector:
    """Detects GT instances still visible under the blackout raster.

    Failure modes: collapsing heavily-overlapping visible instances into one
    merged detection, and missing small instances at ``miss_rate``.
    """

    def __init__(self, profile: CorruptionProfile, seed: int = 0,
                 min_visible_fraction: float = 0.05):
        self.profile = profile
        self.seed = seed
        self.min_visible_fraction = min_visible_fraction

    def detect(self, scene, raster: BlackoutRaster) -> list[Detection]:
        raster_arr = raster.decode()
        eligible = []
        for ins in scene.instances:
            vis = _visible_fraction_arr(ins.full_mask, raster_arr)
            if vis < self.min_visible_fraction:
                continue
            r = _rng(self.seed, "detect-miss", scene.seed, ins.index,
                     _raster_key(raster))
            if self.profile.miss_rate > 0 and r.random() < self.profile.miss_rate:
                continue
            eligible.append((ins, vis))

        # union-find over pairs above the collapse threshold
        parent = list(range(len(eligible)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        thr = self.profile.merge_iou_threshold
        for i in range(len(eligible)):
            for j in range(i + 1, len(eligible)):
                a, b = eligible[i][0], eligible[j][0]
                inter = np.logical_and(a.full_mask, b.full_mask).sum()
                union = np.logical_or(a.full_mask, b.full_mask).sum()
                if union and inter / union >= thr:
                    parent[find(j)] = find(i)

        groups: dict[int, list[int]] = {}
        for i in range(len(eligible)):
            groups.setdefault(find(i), []).append(i)

        dets = []
        for members in groups.values():
            union_mask = np.zeros_like(raster_arr)
            vis_mean = 0.0
            for m in members:
                union_mask |= eligible[m][0].full_mask
                vis_mean += eligible[m][1]
            vis_mean /= len(members)
            ys, xs = np.nonzero(union_mask)
            bbox = (float(xs.min()), float(ys.min()),
                    float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))
            score = float(np.clip(0.55 + 0.45 * vis_mean, 0.0, 1.0))
            # coarse detector mask: filled bbox, models imprecise detector masks
            dets.append(Detection(bbox=bbox, score=score,
                                  mask=mask_from_bbox(bbox, (scene.height, scene.width))))
        dets.sort(key=lambda d: -d.score)
        return dets


def _target_instance(scene, bbox, mask: RleMask | None):
    """GT instance best covered by the given conditioning region.

    Scored as a blend of mask overlap and bbox agreement: coarse box-shaped
    regions stay anchored to the box they came from instead of drifting to a
    larger neighbour whose mask happens to fill the box better.
    """
    if mask is not None:
        region = rle_decode(mask)
    else:
        region = rle_decode(mask_from_bbox(bbox, (scene.height, scene.width)))
    best, best_ov = None, -1.0
    for ins in scene.instances:
        inter = int((region & ins.full_mask).sum())
        union = int((region | ins.full_mask).sum())
        ov = inter / union if union else 0.0
        score = 0.5 * ov + 0.5 * bbox_iou(bbox, ins.bbox)
        if score > best_ov:
            best, best_ov = ins, score
    if best is None:
        raise StageError("scene has no instances")
    return best, best_ov


class OraclePoseEstimator:
    """GT keypoints with corruption: localization noise shrinking with mask
    quality, and wrong-person keypoint swaps when no mask is supplied."""

    def __init__(self, profile: CorruptionProfile, seed: int = 0):
        self.profile = profile
        self.seed = seed

    def estimate_pose(self, scene, bbox, mask: RleMask | None,
                      alpha: float = 0.25) -> PosePrediction:
        if not 0.0 <= alpha <= 1.0:
            raise StageError(f"alpha {alpha} outside [0, 1]")
        target, _ = _target_instance(scene, bbox, mask)
        mask_q = 0.0
        if mask is not None:
            m = rle_decode(mask)
            inter = int((m & target.full_mask).sum())
            union = int((m | target.full_mask).sum())
            mask_q = inter / union if union else 0.0
        r = _rng(self.seed, "pose", scene.seed, target.index,
                 tuple(round(v, 2) for v in bbox),
                 None if mask is None else mask.counts)

        p = self.profile
        sigma = p.keypoint_noise_sigma * target.scale * (
            1.0 - p.mask_noise_reduction * mask_q)
        kp = target.keypoints_2d.copy()
        noise = r.normal(0.0, max(sigma, 1e-9), size=(17, 2))
        # occluded keypoints are harder to localize
        noise[target.flags != 2] *= 1.8
        kp += noise

        # maskless merge corruption: keypoints snap to an overlapping person
        if mask is None and p.merge_swap_rate > 0:
            others = [o for o in scene.instances
                      if o.index != target.index
                      and np.logical_and(o.full_mask, target.full_mask).any()]
            if others:
                other = others[0]
                swap = r.random(17) < p.merge_swap_rate
                kp[swap] = other.keypoints_2d[swap] + noise[swap]

        err = np.linalg.norm(kp - target.keypoints_2d, axis=1)
        true_eoks = np.exp(-(err ** 2) / (2 * (0.1 * target.scale) ** 2))

        in_image = ((target.keypoints_2d[:, 0] >= 0)
                    & (target.keypoints_2d[:, 0] < scene.width)
                    & (target.keypoints_2d[:, 1] >= 0)
                    & (target.keypoints_2d[:, 1] < scene.height))
        presence = np.where(in_image, 0.95, 0.05) + r.normal(0, p.metric_noise, 17)
        visible = target.flags == 2
        visibility = np.where(visible, 0.92, 0.12) + r.normal(0, 0.03, 17)
        expected_oks = true_eoks + r.normal(0, p.metric_noise, 17)
        confidence = true_eoks + r.normal(0, p.metric_noise + p.confidence_noise, 17)
        clip = lambda a: np.clip(a, 0.0, 1.0)
        return PosePrediction(keypoints=kp, presence=clip(presence),
                              visibility=clip(visibility),
                              expected_oks=clip(expected_oks),
                              confidence=clip(confidence))


class OracleSegmenter:
    """Prompt-ownership segmenter.

    Each prompt is owned by the nearest instance whose body contains it.
    Specialized mode returns the majority owner's full GT mask; the
    unspecialized mode returns only the union of touched part regions,
    reproducing over-segmentation behavior.
    """

    def __init__(self, profile: CorruptionProfile, seed: int = 0,
                 specialized: bool = True):
        self.profile = profile
        self.seed = seed
        self.specialized = specialized and not profile.oversegmentation

    def refine_mask(self, scene, prompts, prior_mask: RleMask | None = None) -> RleMask:
        if not prompts:
            raise StageError("segmenter needs at least one prompt")
        owners = []
        hit_parts = []  # (instance, part id)
        for (x, y, *_rest) in prompts:
            xi, yi = int(x), int(y)
            if not (0 <= xi < scene.width and 0 <= yi < scene.height):
                owners.append(None)
                continue
            candidates = [ins for ins in scene.instances
                          if ins.full_mask[yi, xi]]
            if not candidates:
                owners.append(None)
                continue
            # prompts are pose keypoints: of the bodies containing the pixel,
            # the one whose skeleton passes closest owns it. Visible surface
            # evidence is trusted more, so a prompt sitting on an occluder
            # can be stolen by it when the occluder's skeleton is also near.
            pt = np.array([x, y])

            def claim(ins):
                d = float(np.linalg.norm(ins.keypoints_2d - pt, axis=1).min())
                if ins.visible_mask[yi, xi]:
                    d *= 0.6
                return (d, -ins.depth_rank)

            owner = min(candidates, key=claim)
            owners.append(owner)
            part = int(owner.part_label[yi, xi])
            if part > 0:
                hit_parts.append((owner, part))

        hits = [o for o in owners if o is not None]
        shape = (scene.height, scene.width)
        if not hits:
            return rle_encode(np.zeros(shape, dtype=bool))  # flagged: empty
        if self.specialized:
            counts: dict[int, int] = {}
            for o in hits:
                counts[o.index] = counts.get(o.index, 0) + 1
            best_n = max(counts.values())
            majority = next(o for o in owners
                            if o is not None and counts[o.index] == best_n)
            return rle_encode(majority.full_mask)
        out = np.zeros(shape, dtype=bool)
        for owner, part in hit_parts:
            out |= owner.part_label == part
        return rle_encode(out)


class OracleLifter:
    """3D lifter: GT skeletons with prompt-dependent noise; the reprojection
    is the pinhole projection of the (noisy) 3D keypoints."""

    def __init__(self, profile: CorruptionProfile, seed: int = 0):
        self.profile = profile
        self.seed = seed

    def encode_scene(self, scene) -> str:
        return scene_digest(scene)

    def lift_3d(self, scene, bbox, mask: RleMask | None):
        if bbox is None and mask is None:
            raise StageError("lifter needs a bbox or a mask prompt")
        target, _ = _target_instance(scene, bbox, mask)
        p = self.profile
        base = p.noise_3d_with_mask if mask is not None else p.noise_3d_without_mask
        sigma_frac = base * (1.0 + 2.0 * target.ioumax)
        z = float(target.keypoints_3d[:, 2].mean())
        height_3d = target.scale * z / scene.camera.focal
        r = _rng(self.seed, "lift", scene.seed, target.index,
                 tuple(round(v, 2) for v in bbox) if bbox else None,
                 None if mask is None else mask.counts)
        kp3d = target.keypoints_3d.copy()
        kp3d[:, :2] += r.normal(0, max(sigma_frac * height_3d, 1e-12), size=(17, 2))
        reproj = scene.camera.project(kp3d)
        return kp3d, reproj


# ---------------------------------------------------------------------------
# Wire protocol
# ---------------------------------------------------------------------------

def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def payload_digest(obj) -> str:
    return hashlib.blake2b(canonical_json(obj), digest_size=16).hexdigest()


def scene_digest(scene) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(repr((scene.id, scene.seed, scene.width, scene.height)).encode())
    for ins in scene.instances:
        h.update(np.ascontiguousarray(ins.keypoints_3d).tobytes())
        h.update(np.packbits(ins.full_mask).tobytes())
    return h.hexdigest()


def rle_to_wire(rle: RleMask | None):
    if rle is None:
        return None
    return {"size": list(rle.size), "counts": rle_to_coco_string(rle)}


def rle_from_wire(obj) -> RleMask | None:
    if obj is None:
        return None
    try:
        return rle_from_coco_string(obj["counts"], tuple(obj["size"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolError(f"invalid mask payload: {e}") from e


def send_frame(sock, message: dict):
    body = canonical_json(message)
    sock.sendall(struct.pack(">I", len(body)) + body)


def recv_frame(sock) -> dict:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > 64 * 1024 * 1024:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    body = _recv_exact(sock, length)
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed frame: {e}") from e


def _recv_exact(sock, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        buf += chunk
    return buf


def _scene_ref(scene) -> dict:
    return {"id": scene.id, "digest": scene_digest(scene),
            "width": scene.width, "height": scene.height}


def build_request_payload(kind: str, scene, **kw) -> dict:
    """Stage-kind-specific request payload; scene travels as id + digest."""
    payload = {"scene": _scene_ref(scene)}
    if kind == "detector":
        payload["raster"] = rle_to_wire(kw["raster"].mask)
        occ = np.zeros((scene.height, scene.width), dtype=bool)
        for ins in scene.instances:
            occ |= ins.full_mask
        payload["occupancy"] = rle_to_wire(rle_encode(occ)) if occ.any() else None
    elif kind == "pose":
        payload["bbox"] = [float(v) for v in kw["bbox"]]
        payload["mask"] = rle_to_wire(kw["mask"])
        payload["alpha"] = float(kw["alpha"])
    elif kind == "segmenter":
        payload["prompts"] = [[float(x), float(y), int(lbl)]
                              for x, y, lbl in kw["prompts"]]
        payload["prior_mask"] = rle_to_wire(kw["prior_mask"])
    elif kind == "lifter":
        payload["bbox"] = None if kw["bbox"] is None else [float(v) for v in kw["bbox"]]
        payload["mask"] = rle_to_wire(kw["mask"])
    else:
        raise ValueError(f"unknown stage kind {kind!r}")
    return payload


def oracle_response_payload(kind: str, stage, scene, payload: dict) -> dict:
    """Run an in-process stage against a wire request; inverse of the adapter."""
    if kind == "detector":
        raster = BlackoutRaster(size=(scene.height, scene.width),
                                mask=rle_from_wire(payload.get("raster")))
        dets = stage.detect(scene, raster)
        return {"detections": [
            {"bbox": [float(v) for v in d.bbox], "score": round(float(d.score), 9),
             "mask": rle_to_wire(d.mask)} for d in dets]}
    if kind == "pose":
        pose = stage.estimate_pose(scene, tuple(payload["bbox"]),
                                   rle_from_wire(payload.get("mask")),
                                   payload.get("alpha", 0.25))
        rnd = lambda a: [round(float(v), 9) for v in np.asarray(a).reshape(-1)]
        return {"keypoints": [[round(float(x), 9), round(float(y), 9)]
                              for x, y in pose.keypoints],
                "presence": rnd(pose.presence),
                "visibility": rnd(pose.visibility),
                "expected_oks": rnd(pose.expected_oks),
                "confidence": rnd(pose.confidence)}
    if kind == "segmenter":
        mask = stage.refine_mask(scene,
                                 [(p[0], p[1], int(p[2])) for p in payload["prompts"]],
                                 rle_from_wire(payload.get("prior_mask")))
        return {"mask": rle_to_wire(mask)}
    if kind == "lifter":
        bbox = payload.get("bbox")
        kp3d, reproj = stage.lift_3d(scene, tuple(bbox) if bbox else None,
                                     rle_from_wire(payload.get("mask")))
        return {"keypoints_3d": [[round(float(v), 9) for v in row] for row in kp3d],
                "reprojection": [[round(float(v), 9) for v in row] for row in reproj]}
    raise ValueError(f"unknown stage kind {kind!r}")


class ExternalStage:
    """Proxies one stage kind to a server speaking the wire protocol.

    One in-flight request per connection; malformed responses and timeouts
    surface as StageErrors so the engine can fault-isolate.
    """

    def __init__(self, endpoint: str, kind: str, timeout: float = 30.0):
        if kind not in STAGE_KINDS:
            raise ValueError(f"unknown stage kind {kind!r}")
        self.kind = kind
        self.endpoint = endpoint
        self.timeout = timeout
        self._next_id = 0
        host, _, port = endpoint.rpartition(":")
        self._sock = socket.create_connection((host or "127.0.0.1", int(port)),
                                              timeout=timeout)
        send_frame(self._sock, {"type": "HELLO", "version": PROTOCOL_VERSION,
                                "stage_kind": kind})
        reply = recv_frame(self._sock)
        if reply.get("type") != "ACK":
            self._sock.close()
            raise ProtocolError(f"handshake rejected: {reply}")

    def close(self):
        self._sock.close()

    def _call(self, payload: dict) -> dict:
        self._next_id += 1
        cid = self._next_id
        try:
            send_frame(self._sock, {"type": "REQUEST", "correlation_id": cid,
                                    "stage_kind": self.kind, "payload": payload})
            reply = recv_frame(self._sock)
        except (OSError, ProtocolError) as e:
            raise StageError(f"stage call failed: {e}") from e
        if reply.get("type") != "RESPONSE" or reply.get("correlation_id") != cid:
            raise ProtocolError(f"unexpected reply: {reply.get('type')}")
        if reply.get("status") != "ok":
            raise StageError(f"stage error: {reply.get('status')}: "
                             f"{reply.get('payload')}")
        return reply.get("payload") or {}

    # stage-interface methods; each validates the response payload
    def detect(self, scene, raster: BlackoutRaster) -> list[Detection]:
        resp = self._call(build_request_payload("detector", scene, raster=raster))
        try:
            return [Detection(bbox=tuple(d["bbox"]), score=float(d["score"]),
                              mask=rle_from_wire(d.get("mask")))
                    for d in resp["detections"]]
        except (KeyError, TypeError, StageError) as e:
            raise ProtocolError(f"invalid detector response: {e}") from e

    def estimate_pose(self, scene, bbox, mask, alpha: float = 0.25) -> PosePrediction:
        resp = self._call(build_request_payload("pose", scene, bbox=bbox,
                                                mask=mask, alpha=alpha))
        try:
            return PosePrediction(
                keypoints=np.asarray(resp["keypoints"], dtype=float),
                presence=np.asarray(resp["presence"], dtype=float),
                visibility=np.asarray(resp["visibility"], dtype=float),
                expected_oks=np.asarray(resp["expected_oks"], dtype=float),
                confidence=np.asarray(resp["confidence"], dtype=float))
        except (KeyError, TypeError, ValueError, StageError) as e:
            raise ProtocolError(f"invalid pose response: {e}") from e

    def refine_mask(self, scene, prompts, prior_mask=None) -> RleMask:
        resp = self._call(build_request_payload("segmenter", scene,
                                                prompts=prompts,
                                                prior_mask=prior_mask))
        mask = rle_from_wire(resp.get("mask"))
        if mask is None:
            raise ProtocolError("segmenter response carries no mask")
        return mask

    def encode_scene(self, scene) -> str:
        return scene_digest(scene)

    def lift_3d(self, scene, bbox, mask):
        resp = self._call(build_request_payload("lifter", scene, bbox=bbox,
                                                mask=mask))
        try:
            return (np.asarray(resp["keypoints_3d"], dtype=float),
                    np.asarray(resp["reprojection"], dtype=float))
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"invalid lifter response: {e}") from e


def external_stage_adapter(endpoint: str, kind: str,
                           timeout: float = 30.0) -> ExternalStage:
    return ExternalStage(endpoint, kind, timeout)


def oracle_stage_set(profile: CorruptionProfile, seed: int = 0,
                     specialized_segmenter: bool = True,
                     with_lifter: bool = False) -> StageSet:
    return StageSet(
        detector=OracleDetector(profile, seed),
        pose_estimator=OraclePoseEstimator(profile, seed),
        mask_refiner=OracleSegmenter(profile, seed,
                                     specialized=specialized_segmenter),
        lifter_3d=OracleLifter(profile, seed) if with_lifter else None)
