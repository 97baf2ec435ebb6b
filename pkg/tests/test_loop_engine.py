import numpy as np
import pytest

from bmploop.coco_io import rle_decode, rle_encode
from bmploop.loop_engine import (LoopResult, NoPromptError, PromptPolicy,
                                 StageConfig, converged, pose_nms, run_loop,
                                 run_3d_handoff, sample_training_prompts,
                                 select_prompts)
from bmploop.model_stages import (CorruptionProfile, PosePrediction,
                                  StageError, StageSet, oracle_stage_set)
from bmploop.synthetic_world import make_dataset

from .conftest import crowded_world


def _pose(keypoints, presence=None, visibility=None, expected_oks=None,
          confidence=None):
    ones = np.ones(17)
    return PosePrediction(keypoints=np.asarray(keypoints, dtype=float),
                          presence=ones if presence is None else presence,
                          visibility=ones if visibility is None else visibility,
                          expected_oks=ones if expected_oks is None else expected_oks,
                          confidence=ones if confidence is None else confidence)


@pytest.fixture(scope="module")
def scenes():
    out, _, _ = make_dataset(crowded_world(), 12, seed=2100)
    return out


class TestSelectPrompts:
    def _grid_pose(self):
        kp = np.stack([np.arange(17, dtype=float) * 3 + 1,
                       np.full(17, 10.0)], axis=1)
        return kp

    def test_top_k_by_metric(self):
        vis = np.linspace(0.1, 0.9, 17)
        pose = _pose(self._grid_pose(), visibility=vis)
        out = select_prompts(pose, PromptPolicy.Visibility, 3, 0.5, (64, 64))
        xs = [p[0] for p in out]
        # highest-visibility keypoints are the last three
        assert xs == [16 * 3 + 1, 15 * 3 + 1, 14 * 3 + 1]
        assert all(lbl == 1 for _, _, lbl in out)

    def test_tie_breaks_on_keypoint_index(self):
        pose = _pose(self._grid_pose(), visibility=np.full(17, 0.5))
        out = select_prompts(pose, PromptPolicy.Visibility, 2, 0.0, (64, 64))
        assert [p[0] for p in out] == [1.0, 4.0]

    def test_presence_cutoff_filters(self):
        presence = np.full(17, 0.2)
        presence[5] = 0.9
        pose = _pose(self._grid_pose(), presence=presence)
        out = select_prompts(pose, PromptPolicy.Visibility, 3, 0.5, (64, 64))
        assert len(out) == 1
        assert out[0][0] == 5 * 3 + 1

    def test_out_of_image_excluded(self):
        kp = self._grid_pose()
        kp[:10, 0] = -5.0  # off the left edge
        pose = _pose(kp)
        out = select_prompts(pose, PromptPolicy.Confidence, 17, 0.5, (64, 64))
        assert len(out) == 7

    def test_nothing_eligible_raises(self):
        pose = _pose(self._grid_pose(), presence=np.zeros(17))
        with pytest.raises(NoPromptError):
            select_prompts(pose, PromptPolicy.Visibility, 3, 0.5, (64, 64))

    def test_each_policy_uses_its_metric(self):
        arrays = {}
        for name in ("presence", "visibility", "expected_oks", "confidence"):
            a = np.full(17, 0.6)
            a[hash(name) % 17] = 0.9
            arrays[name] = a
        pose = _pose(self._grid_pose(), **arrays)
        for policy, name in [(PromptPolicy.Presence, "presence"),
                             (PromptPolicy.Visibility, "visibility"),
                             (PromptPolicy.ExpectedOks, "expected_oks"),
                             (PromptPolicy.Confidence, "confidence")]:
            out = select_prompts(pose, policy, 1, 0.5, (64, 64))
            assert out[0][0] == (hash(name) % 17) * 3 + 1


class TestTrainingPrompts:
    def test_first_prompt_is_most_visible_keypoint(self, rng):
        vis = np.zeros(17)
        vis[4] = 1.0
        pose = _pose(np.tile([7.0, 9.0], (17, 1)), visibility=vis)
        gt = np.zeros((16, 16), dtype=bool)
        x, y, lbl = sample_training_prompts(gt, None, pose, rng)
        assert (x, y, lbl) == (7.0, 9.0, 1)

    def test_error_region_keypoint_preferred(self, rng):
        gt = np.zeros((16, 16), dtype=bool)
        gt[0:8, :] = True
        pred = np.zeros((16, 16), dtype=bool)  # top half missing
        kp = np.tile([2.0, 12.0], (17, 1))     # most keypoints outside error
        kp[3] = [5.0, 5.0]                     # inside the missing region
        vis = np.full(17, 0.5)
        vis[3] = 0.6
        x, y, lbl = sample_training_prompts(gt, pred, pose := _pose(kp, visibility=vis), rng)
        assert (x, y) == (5.0, 5.0)
        assert lbl == 1  # pixel belongs to GT, positive click

    def test_negative_label_on_false_positive_region(self, rng):
        gt = np.zeros((16, 16), dtype=bool)
        pred = np.zeros((16, 16), dtype=bool)
        pred[4:6, 4:6] = True  # spurious prediction
        kp = np.tile([4.5, 4.5], (17, 1))
        _, _, lbl = sample_training_prompts(gt, pred, _pose(kp), rng)
        assert lbl == 0

    def test_random_pixel_when_no_keypoint_in_error(self, rng):
        gt = np.zeros((16, 16), dtype=bool)
        gt[10:12, 10:12] = True
        pred = np.zeros((16, 16), dtype=bool)
        kp = np.tile([2.0, 2.0], (17, 1))  # all far from the error region
        x, y, lbl = sample_training_prompts(gt, pred, _pose(kp), rng)
        assert lbl == 1
        assert gt[int(y), int(x)]

    def test_converged_returns_none(self, rng):
        gt = np.zeros((16, 16), dtype=bool)
        gt[3:6, 3:6] = True
        out = sample_training_prompts(gt, gt.copy(), _pose(np.zeros((17, 2))), rng)
        assert out is None


class TestPoseNms:
    def test_duplicate_suppressed_keeps_higher_score(self):
        kp = np.tile([10.0, 10.0], (17, 1))
        items = [(_pose(kp), 0.6, 100.0),
                 (_pose(kp + 0.01), 0.9, 100.0),
                 (_pose(kp + 200.0), 0.5, 100.0)]
        kept = pose_nms(items, 0.9)
        assert kept == [1, 2]

    def test_threshold_one_keeps_distinct(self):
        kp = np.tile([10.0, 10.0], (17, 1))
        items = [(_pose(kp), 0.6, 100.0), (_pose(kp + 0.5), 0.9, 100.0)]
        assert pose_nms(items, 0.999999) == [0, 1]
        assert len(pose_nms(items, 0.05)) == 1

    def test_empty_input(self):
        assert pose_nms([], 0.9) == []


class TestConverged:
    def _result(self, poses):
        from bmploop.loop_engine import LoopInstance
        from bmploop.model_stages import Detection
        instances = [
            LoopInstance(instance_id=i + 1,
                         detection=Detection(bbox=(0, 0, 10, 10), score=0.9),
                         pose=p, mask=rle_encode(np.ones((20, 20), dtype=bool)),
                         score=0.9)
            for i, p in enumerate(poses)]
        return LoopResult(scene_id=1, instances=instances,
                          raster=None, trace=[])

    def test_identical_poses_converge(self):
        kp = np.tile([5.0, 5.0], (17, 1))
        a = self._result([_pose(kp), _pose(kp + 50)])
        b = self._result([_pose(kp), _pose(kp + 50)])
        assert converged(a, b, 0.01)

    def test_count_change_blocks_convergence(self):
        kp = np.tile([5.0, 5.0], (17, 1))
        a = self._result([_pose(kp)])
        b = self._result([_pose(kp), _pose(kp + 50)])
        assert not converged(a, b, 0.01)

    def test_large_motion_blocks_convergence(self):
        kp = np.tile([5.0, 5.0], (17, 1))
        a = self._result([_pose(kp)])
        b = self._result([_pose(kp + 8.0)])
        assert not converged(a, b, 0.01)

    def test_empty_results_converge(self):
        a = self._result([])
        b = self._result([])
        assert converged(a, b, 0.01)


class TestRunLoopPerfect:
    def test_recovers_every_instance_with_gt_masks(self, scenes):
        stages = oracle_stage_set(CorruptionProfile.perfect())
        cfg = StageConfig()
        for s in scenes:
            res = run_loop(s, stages, cfg)
            kept = res.kept()
            assert len(kept) == len(s.instances)
            gt_masks = {np.packbits(i.full_mask).tobytes() for i in s.instances}
            got = {np.packbits(rle_decode(k.mask)).tobytes() for k in kept}
            assert got == gt_masks
            assert res.lifter_skipped

    def test_trace_digest_deterministic_and_ignores_wall_time(self, scenes):
        stages = oracle_stage_set(CorruptionProfile.standard(), seed=4)
        cfg = StageConfig(plus_mode=True)
        s = scenes[0]
        a = run_loop(s, stages, cfg)
        b = run_loop(s, stages, cfg)
        assert a.digest() == b.digest()
        wall_a = [r.wall_ms for r in a.trace]
        wall_b = [r.wall_ms for r in b.trace]
        assert wall_a != wall_b  # wall time differs run to run...
        rec = a.trace[0]
        assert '"wall_ms"' in rec.to_json()
        assert '"wall_ms"' not in rec.to_json(include_wall_time=False)

    def test_write_trace(self, scenes, tmp_path):
        stages = oracle_stage_set(CorruptionProfile.perfect())
        res = run_loop(scenes[0], stages, StageConfig())
        path = tmp_path / "trace.jsonl"
        res.write_trace(path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(res.trace)
        import json
        assert all("stage" in json.loads(ln) for ln in lines)


class TestRunLoopCorrupted:
    def test_second_pass_recovers_collapsed_people(self, scenes):
        stages = oracle_stage_set(CorruptionProfile.standard(), seed=8)
        single = StageConfig(max_detector_passes=1)
        double = StageConfig(max_detector_passes=2)
        n1 = sum(len(run_loop(s, stages, single).kept()) for s in scenes)
        n2 = sum(len(run_loop(s, stages, double).kept()) for s in scenes)
        assert n2 > n1

    def test_plus_mode_adds_pose_refinement_records(self, scenes):
        stages = oracle_stage_set(CorruptionProfile.standard(), seed=8)
        res = run_loop(scenes[0], stages, StageConfig(plus_mode=True))
        assert any(r.stage == "pose+" for r in res.trace)
        plain = run_loop(scenes[0], stages, StageConfig())
        assert not any(r.stage == "pose+" for r in plain.trace)

    def test_convergence_stops_iterations(self, scenes):
        # perfect oracles re-estimate the identical pose, so plus mode stops
        # after a single extra pass despite a larger iteration budget
        stages = oracle_stage_set(CorruptionProfile.perfect())
        res = run_loop(scenes[0], stages,
                       StageConfig(plus_mode=True, max_pose_iterations=5))
        rounds = {r.pass_index for r in res.trace if r.stage == "pose+"}
        assert rounds == {100}


class _StaticDetector:
    def __init__(self, detections):
        self.detections = detections

    def detect(self, scene, raster):
        return list(self.detections)


class _StubPose:
    def __init__(self, pose=None, error=None):
        self.pose = pose
        self.error = error

    def estimate_pose(self, scene, bbox, mask, alpha=0.25):
        if self.error:
            raise StageError(self.error)
        return self.pose


class _StubSegmenter:
    def __init__(self, mask):
        self.mask = mask
        self.seen_prompts = []

    def refine_mask(self, scene, prompts, prior_mask=None):
        self.seen_prompts.append(list(prompts))
        return self.mask


class TestFaultIsolation:
    def _scene(self, scenes):
        return scenes[0]

    def test_pose_failure_isolated(self, scenes):
        from bmploop.model_stages import Detection
        s = self._scene(scenes)
        det = Detection(bbox=(5, 5, 20, 20), score=0.9)
        stages = StageSet(detector=_StaticDetector([det]),
                          pose_estimator=_StubPose(error="boom"),
                          mask_refiner=_StubSegmenter(
                              rle_encode(np.ones((s.height, s.width), bool))))
        res = run_loop(s, stages, StageConfig())
        assert all(i.failed for i in res.instances)
        assert "boom" in res.instances[0].failure
        assert any(r.stage == "failure" for r in res.trace)

    def test_bbox_center_fallback_prompt(self, scenes):
        from bmploop.model_stages import Detection
        s = self._scene(scenes)
        det = Detection(bbox=(8, 6, 20, 10), score=0.9)
        pose = _pose(np.tile([10.0, 10.0], (17, 1)), presence=np.zeros(17))
        seg = _StubSegmenter(rle_encode(np.ones((s.height, s.width), bool)))
        stages = StageSet(detector=_StaticDetector([det]),
                          pose_estimator=_StubPose(pose=pose),
                          mask_refiner=seg)
        res = run_loop(s, stages, StageConfig(max_detector_passes=1))
        inst = res.instances[0]
        assert inst.prompt_fallback
        assert seg.seen_prompts[0] == [(18.0, 11.0, 1)]

    def test_empty_mask_falls_back_to_detection(self, scenes):
        from bmploop.model_stages import Detection
        from bmploop.geometry import mask_from_bbox
        s = self._scene(scenes)
        det = Detection(bbox=(5, 5, 12, 12), score=0.9,
                        mask=mask_from_bbox((5, 5, 12, 12), (s.height, s.width)))
        pose = _pose(np.tile([10.0, 10.0], (17, 1)))
        seg = _StubSegmenter(rle_encode(np.zeros((s.height, s.width), bool)))
        stages = StageSet(detector=_StaticDetector([det]),
                          pose_estimator=_StubPose(pose=pose),
                          mask_refiner=seg)
        res = run_loop(s, stages, StageConfig(max_detector_passes=1))
        inst = res.instances[0]
        assert "empty-mask-fallback" in inst.history
        assert inst.mask.counts == det.mask.counts

    def test_low_score_detections_skipped(self, scenes):
        from bmploop.model_stages import Detection
        s = self._scene(scenes)
        det = Detection(bbox=(5, 5, 12, 12), score=0.1)
        stages = StageSet(detector=_StaticDetector([det]),
                          pose_estimator=_StubPose(error="never called"),
                          mask_refiner=_StubSegmenter(None))
        res = run_loop(s, stages, StageConfig(detector_score_threshold=0.3,
                                              max_detector_passes=1))
        assert res.instances == []


class Test3DHandoff:
    def test_lift_inherits_2d_scores(self, scenes):
        stages = oracle_stage_set(CorruptionProfile.perfect(), with_lifter=True)
        s = scenes[0]
        res = run_loop(s, stages, StageConfig())
        assert not res.lifter_skipped
        assert len(res.lifted) == len(res.kept())
        by_id = {i.instance_id: i for i in res.kept()}
        for lf in res.lifted:
            assert lf.score == by_id[lf.instance_id].score
            assert lf.keypoints_3d.shape == (17, 3)

    def test_handoff_without_lifter_is_marked_skipped(self, scenes):
        stages = oracle_stage_set(CorruptionProfile.perfect())
        res = run_loop(scenes[0], stages, StageConfig())
        assert run_3d_handoff(res, None, StageConfig(), scenes[0]) == []
        assert res.lifter_skipped

    def test_mask_vs_bbox_prompting_changes_noise(self, scenes):
        stages = oracle_stage_set(CorruptionProfile.standard(), seed=6,
                                  with_lifter=True)
        errs = {True: [], False: []}
        for s in scenes:
            res = run_loop(s, stages, StageConfig())
            gt3d = {i.index: i.keypoints_3d for i in s.instances}
            for use_masks in (True, False):
                lifted = run_3d_handoff(res, stages.lifter_3d, StageConfig(),
                                        s, use_masks=use_masks)
                for lf in lifted:
                    best = min(np.linalg.norm(lf.keypoints_3d - g, axis=1).mean()
                               for g in gt3d.values())
                    errs[use_masks].append(best)
        assert np.mean(errs[True]) < np.mean(errs[False])
