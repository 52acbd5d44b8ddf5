import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stif.geometry import to_world
from stif.simulator import (ATTRIBUTES, ConfigError, GroundTruthAssociation, ScenarioConfig,
                            generate, gt_association, scenario_suite)

NOISELESS = dict(pos_noise_sigma=0.0, dim_noise_sigma=0.0, yaw_noise_sigma=0.0, reid_noise_sigma=0.0,
                 dropout_prob=0.0, fp_rate=0.0)


def _flatten(sc):
    out = []
    for f in sc.det_frames:
        for d in f.detections:
            out.append(np.concatenate([d.box3d.as_array(), d.box2d.as_array(), d.appearance,
                                       [d.confidence, d.category, -1 if d.gt_identity is None else d.gt_identity]]))
    return np.asarray(out)


class TestConfig:
    def test_too_many_objects(self):
        with pytest.raises(ConfigError):
            generate(ScenarioConfig(n_objects=17, K=16))

    @pytest.mark.parametrize("kw", [{"dropout_prob": 1.5}, {"pos_noise_sigma": -1}, {"fp_rate": -0.1},
                                    {"motion_mix": (0.5, 0.5, 0.5)}, {"frame_dt": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ScenarioConfig(**kw).validate()

    def test_round_trip(self):
        c = ScenarioConfig(seed=9, motion_mix=(0.2, 0.3, 0.5))
        assert ScenarioConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ScenarioConfig.from_dict({"bogus": 1})


class TestGenerate:
    def test_determinism_bit_exact(self):
        a = _flatten(generate(ScenarioConfig(seed=42, n_frames=15)))
        b = _flatten(generate(ScenarioConfig(seed=42, n_frames=15)))
        assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ(self):
        a = _flatten(generate(ScenarioConfig(seed=1, n_frames=10)))
        b = _flatten(generate(ScenarioConfig(seed=2, n_frames=10)))
        assert a.shape != b.shape or not np.array_equal(a, b)

    def test_noiseless_detections_equal_gt(self):
        sc = generate(ScenarioConfig(seed=3, n_frames=12, **NOISELESS))
        protos: dict[int, np.ndarray] = {}
        for g, f in zip(sc.gt_frames, sc.det_frames):
            gt = g.by_identity()
            assert len(f.detections) == len(gt)
            for d, wb in zip(f.detections, f.world_boxes()):
                np.testing.assert_allclose(wb.as_array(), gt[d.gt_identity].box.as_array(), atol=1e-9)
                if d.gt_identity in protos:
                    np.testing.assert_array_equal(protos[d.gt_identity], d.appearance)
                protos[d.gt_identity] = d.appearance

    def test_full_dropout_leaves_no_true_objects(self):
        sc = generate(ScenarioConfig(seed=4, n_frames=10, dropout_prob=1.0))
        assert all(d.gt_identity is None for f in sc.det_frames for d in f.detections)

    def test_detection_invariants(self):
        sc = generate(ScenarioConfig(seed=5, n_frames=20, fp_rate=2.0))
        for f in sc.det_frames:
            assert len(f.detections) <= sc.config.K
            for d in f.detections:
                assert abs(np.linalg.norm(d.appearance) - 1.0) < 1e-12
                assert 0.0 <= d.confidence <= 1.0

    def test_identities_persistent_and_attributes_consistent(self):
        sc = generate(ScenarioConfig(seed=6, n_frames=30, n_objects=10))
        cats, attrs = {}, {}
        for g in sc.gt_frames:
            for o in g.objects:
                speed = float(np.linalg.norm(o.velocity))
                assert cats.setdefault(o.identity, o.category) == o.category
                assert attrs.setdefault(o.identity, o.attribute) == o.attribute
                assert (ATTRIBUTES[o.attribute] == "moving") == (speed > 0.5)
                if ATTRIBUTES[o.attribute] == "parked":
                    assert speed == 0.0

    def test_velocity_matches_finite_difference(self):
        sc = generate(ScenarioConfig(seed=7, n_frames=20, n_objects=10, motion_mix=(1.0, 0.0, 0.0)))
        dt = sc.config.frame_dt
        for a, b in zip(sc.gt_frames, sc.gt_frames[1:]):
            nxt = b.by_identity()
            for o in a.objects:
                if o.identity in nxt:
                    fd = (nxt[o.identity].box.center - o.box.center) / dt
                    np.testing.assert_allclose(fd, o.velocity, atol=1e-9)

    def test_scene_suite_object_counts(self):
        suite = scenario_suite(5, base_seed=100, n_frames=4)
        assert [s.config.n_objects for s in suite] == [6, 7, 8, 9, 10]
        assert [s.config.seed for s in suite] == [100, 101, 102, 103, 104]

    def test_objects_mostly_visible(self):
        sc = generate(ScenarioConfig(seed=8, n_frames=40, n_objects=8, late_birth_prob=0.0,
                                     early_death_prob=0.0))
        counts = [len(g.objects) for g in sc.gt_frames]
        assert min(counts[:5]) >= 6
        assert np.mean(counts) >= 6


class TestAssociation:
    def test_identical_frames_give_identity(self):
        sc = generate(ScenarioConfig(seed=9, n_frames=3, **NOISELESS))
        f = sc.det_frames[1]
        a = gt_association(f, f)
        n = len(f.detections)
        np.testing.assert_array_equal(a.matrix[:n, :n], np.eye(n))

    def test_empty_previous_frame(self):
        sc = generate(ScenarioConfig(seed=10, n_frames=3, **NOISELESS))
        from stif.simulator import DetectionFrame
        empty = DetectionFrame(0, 0.0, sc.det_frames[0].ego_pose, [])
        a = gt_association(sc.det_frames[1], empty)
        assert a.matrix.shape[1] == 1
        assert a.matrix[:-1, 0].all()

    def test_dropout_in_previous_maps_to_slot(self):
        sc = generate(ScenarioConfig(seed=11, n_frames=3, **NOISELESS))
        from stif.simulator import DetectionFrame
        cur, prev = sc.det_frames[2], sc.det_frames[1]
        dropped = DetectionFrame(prev.frame_index, prev.timestamp, prev.ego_pose, prev.detections[1:])
        a = gt_association(cur, dropped)
        lost = prev.detections[0].gt_identity
        i = next(k for k, d in enumerate(cur.detections) if d.gt_identity == lost)
        assert a.matrix[i, -1] == 1

    @settings(max_examples=25)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_always_valid(self, seed, zeta):
        sc = generate(ScenarioConfig(seed=seed, n_frames=zeta + 1, fp_rate=1.0, dropout_prob=0.3))
        a = gt_association(sc.det_frames[zeta], sc.det_frames[0])
        GroundTruthAssociation(a.matrix, a.n, a.m)  # re-validates
        assert a.matrix[: a.n].sum(axis=1).tolist() == [1.0] * a.n

    def test_invalid_matrix(self):
        with pytest.raises(ValueError):
            GroundTruthAssociation(np.ones((2, 2)), 1, 1)

    def test_dense_layout(self):
        a = GroundTruthAssociation(np.array([[0, 1.0], [1, 0]]), 1, 1)
        d = a.dense(4)
        assert d[0, 4] == 1 and d[4, 0] == 1 and d.sum() == 2
