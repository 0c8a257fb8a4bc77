import numpy as np
import pytest

from taxposed.errors import InsufficientPointsError, VersionMismatchError
from taxposed.datagen import (
    PLACEMENT_MARGIN,
    add_distractor,
    ball_occlusion,
    derive_observation,
    downsample,
    generate_dataset,
    ground_truth_cross_pose,
    make_action_shape,
    make_demonstration,
    make_site_shape,
    planar_occlusion,
    read_dataset,
    write_dataset,
)
from taxposed.geometry import (
    ACTION,
    ANCHOR,
    PointCloud,
    aabb_overlap,
    rotation_angle,
)


def alignment_error(P, Q):
    """Best-case mean distance between two equal-size clouds under point matching.

    Greedy nearest-neighbor is enough as an upper bound for 'these are the
    same points'.
    """
    d = np.linalg.norm(P[:, None] - Q[None], axis=-1)
    return d.min(axis=1).mean()


class TestShapes:
    def test_action_shape_has_no_self_symmetry(self):
        # An asymmetric scaffold must not align with a rotated copy of itself
        # (other than the identity): search over axis flips and 90-degree
        # rotations and require a clear alignment gap.
        from scipy.spatial.transform import Rotation

        rng = np.random.default_rng(0)
        shape = make_action_shape(rng)
        pts = shape.points - shape.points.mean(axis=0)
        best_nontrivial = np.inf
        for R in Rotation.create_group("O").as_matrix():  # octahedral rotations
            if np.allclose(R, np.eye(3)):
                continue
            best_nontrivial = min(best_nontrivial, alignment_error(pts @ R.T, pts))
        assert best_nontrivial > 0.02

    def test_segments(self):
        rng = np.random.default_rng(1)
        assert (make_action_shape(rng).segment == ACTION).all()
        assert (make_site_shape(rng).segment == ANCHOR).all()

    def test_centered(self):
        rng = np.random.default_rng(2)
        np.testing.assert_allclose(
            make_action_shape(rng).points.mean(axis=0), np.zeros(3), atol=1e-5
        )

    def test_float32(self):
        assert make_action_shape(np.random.default_rng(3)).points.dtype == np.float32


class TestMakeDemonstration:
    def test_basic_structure(self):
        rng = np.random.default_rng(4)
        rec = make_demonstration(2, rng)
        assert rec.num_sites == 2
        assert 0 <= rec.mode_id < 2
        assert rec.cloud.action_mask.sum() == 128
        assert rec.cloud.anchor_mask.sum() == 256

    def test_action_sits_at_mode_site(self):
        rng = np.random.default_rng(5)
        rec = make_demonstration(2, rng)
        # Action centroid is near its site transform's translation.
        t = rec.site_transforms[rec.mode_id].translation
        assert np.linalg.norm(rec.cloud.action_points.mean(axis=0) - t) < 0.3

    def test_sites_do_not_overlap(self):
        rng = np.random.default_rng(6)
        rec = make_demonstration(3, rng)
        n = rec.site_point_count
        clouds = [
            PointCloud(rec.cloud.anchor_points[i * n : (i + 1) * n], np.full(n, ANCHOR))
            for i in range(3)
        ]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not aabb_overlap(clouds[i], clouds[j], 0.0)

    def test_action_clears_other_sites(self):
        rng = np.random.default_rng(7)
        rec = make_demonstration(3, rng)
        n = rec.site_point_count
        action = PointCloud(rec.cloud.action_points, np.full(128, ACTION))
        for i in range(3):
            if i == rec.mode_id:
                continue
            site = PointCloud(rec.cloud.anchor_points[i * n : (i + 1) * n], np.full(n, ANCHOR))
            assert not aabb_overlap(action, site, PLACEMENT_MARGIN)

    def test_mode_choice_varies(self):
        modes = {
            make_demonstration(2, np.random.default_rng(s)).mode_id for s in range(12)
        }
        assert modes == {0, 1}

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            make_demonstration(0, np.random.default_rng(0))


class TestGroundTruthCrossPose:
    def test_recovered_mode_maps_action_onto_demo_placement(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            rec = make_demonstration(2, rng)
            obs = derive_observation(rec, rng)
            T = ground_truth_cross_pose(obs, rec.mode_id)
            # Mapping the observed action points by T must land them on the
            # demonstration placement re-posed by the anchor's transform.
            expected = obs.T_applied_B.apply(rec.cloud.action_points)
            got = T.apply(obs.cloud.action_points)
            assert np.abs(got - expected).max() <= 1e-5

    def test_other_mode_lands_on_other_site(self):
        rng = np.random.default_rng(9)
        rec = make_demonstration(2, rng)
        obs = derive_observation(rec, rng)
        other = 1 - rec.mode_id
        T = ground_truth_cross_pose(obs, other)
        placed = T.apply(obs.cloud.action_points)
        # Centroid lands near the other site's attach point (in the observed
        # anchor frame).
        target = obs.T_applied_B.apply(rec.site_transforms[other].translation)
        assert np.linalg.norm(placed.mean(axis=0) - target) < 0.3

    def test_modes_are_distinct(self):
        rng = np.random.default_rng(10)
        rec = make_demonstration(2, rng)
        obs = derive_observation(rec, rng)
        T0 = ground_truth_cross_pose(obs, 0)
        T1 = ground_truth_cross_pose(obs, 1)
        assert np.linalg.norm(T0.translation - T1.translation) > 0.1


class TestDeriveObservation:
    def test_segments_move_independently(self):
        rng = np.random.default_rng(11)
        rec = make_demonstration(2, rng)
        obs = derive_observation(rec, rng)
        assert rotation_angle(obs.T_applied_A.rotation, obs.T_applied_B.rotation) > 1e-3
        np.testing.assert_allclose(
            obs.cloud.action_points,
            obs.T_applied_A.apply(rec.cloud.action_points).astype(np.float32),
            atol=1e-6,
        )

    def test_source_untouched(self):
        rng = np.random.default_rng(12)
        rec = make_demonstration(2, rng)
        before = rec.cloud.points.copy()
        derive_observation(rec, rng)
        np.testing.assert_array_equal(rec.cloud.points, before)


class TestOcclusions:
    def _cloud(self, rng, n=200):
        return PointCloud(rng.normal(size=(n, 3)).astype(np.float32), np.full(n, ACTION))

    def test_planar_removes_points_keeps_minimum(self):
        rng = np.random.default_rng(13)
        P = self._cloud(rng)
        out = planar_occlusion(P, rng, min_points=16)
        assert 16 <= len(out.points) < 200

    def test_planar_keeps_halfspace(self):
        # Every kept point is a subset of the original cloud.
        rng = np.random.default_rng(14)
        P = self._cloud(rng)
        out = planar_occlusion(P, rng)
        orig = {tuple(p) for p in P.points.tolist()}
        assert all(tuple(p) in orig for p in out.points.tolist())

    def test_ball_removes_neighborhood(self):
        rng = np.random.default_rng(15)
        P = self._cloud(rng)
        out = ball_occlusion(P, rng, radius=0.5, min_points=16)
        assert len(out.points) < 200
        removed = {tuple(p) for p in P.points.tolist()} - {
            tuple(p) for p in out.points.tolist()
        }
        assert removed  # something was cut

    def test_ball_respects_radius(self):
        rng = np.random.default_rng(16)
        P = self._cloud(rng)
        before = {tuple(p) for p in P.points.tolist()}
        out = ball_occlusion(P, rng, radius=0.4, min_points=16)
        kept = {tuple(p) for p in out.points.tolist()}
        removed = np.array(sorted(before - kept))
        # All removed points fit inside some ball of the given radius: their
        # pairwise distances to the nearest kept boundary are bounded by 2r.
        if len(removed) > 1:
            d = np.linalg.norm(removed[:, None] - removed[None], axis=-1)
            assert d.max() <= 0.8 + 1e-6


class TestDownsample:
    def test_per_segment_counts(self):
        rng = np.random.default_rng(17)
        rec = make_demonstration(2, rng)
        out = downsample(rec.cloud, 64, rng)
        assert out.action_mask.sum() == 64
        assert out.anchor_mask.sum() == 64

    def test_points_are_subset(self):
        rng = np.random.default_rng(18)
        rec = make_demonstration(2, rng)
        out = downsample(rec.cloud, 64, rng, method="farthest")
        orig = {tuple(p) for p in rec.cloud.points.tolist()}
        assert all(tuple(p) in orig for p in out.points.tolist())

    def test_farthest_spreads_more_than_random(self):
        # FPS should cover the cloud: its minimum nearest-neighbor spacing
        # is at least that of a random subset, on average.
        rng = np.random.default_rng(19)
        rec = make_demonstration(2, rng)

        def min_spacing(P):
            pts = P.action_points
            d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
            np.fill_diagonal(d, np.inf)
            return d.min(axis=1).mean()

        f = min_spacing(downsample(rec.cloud, 32, np.random.default_rng(1), "farthest"))
        r = min_spacing(downsample(rec.cloud, 32, np.random.default_rng(1), "random"))
        assert f > r

    def test_insufficient_points(self):
        rng = np.random.default_rng(20)
        P = PointCloud(rng.normal(size=(10, 3)), np.full(10, ACTION))
        with pytest.raises(InsufficientPointsError):
            downsample(P, 11, rng)

    def test_unknown_method(self):
        rng = np.random.default_rng(21)
        P = PointCloud(rng.normal(size=(10, 3)), np.full(10, ACTION))
        with pytest.raises(ValueError):
            downsample(P, 5, rng, method="bogus")


class TestDistractor:
    def test_valid_distractor_extends_modes(self):
        rng = np.random.default_rng(22)
        rec = make_demonstration(2, rng)
        out = add_distractor(rec, rng, valid=True)
        assert out.num_sites == 3
        assert out.cloud.anchor_mask.sum() == rec.cloud.anchor_mask.sum() + rec.site_point_count

    def test_decoy_distractor_keeps_modes(self):
        rng = np.random.default_rng(23)
        rec = make_demonstration(2, rng)
        out = add_distractor(rec, rng, valid=False)
        assert out.num_sites == 2
        assert out.cloud.anchor_mask.sum() == rec.cloud.anchor_mask.sum() + rec.site_point_count

    def test_distractor_clear_of_scene(self):
        rng = np.random.default_rng(24)
        rec = make_demonstration(2, rng)
        out = add_distractor(rec, rng, valid=True)
        n = rec.site_point_count
        new_pts = out.cloud.anchor_points[-n:]
        new_cloud = PointCloud(new_pts, np.full(n, ANCHOR))
        old_anchor = PointCloud(rec.cloud.anchor_points, np.full(2 * n, ANCHOR))
        assert not aabb_overlap(new_cloud, old_anchor, 0.0)

    def test_valid_distractor_is_reachable_mode(self):
        rng = np.random.default_rng(25)
        rec = make_demonstration(2, rng)
        out = add_distractor(rec, rng, valid=True)
        obs = derive_observation(out, rng)
        T = ground_truth_cross_pose(obs, 2)
        placed = T.apply(obs.cloud.action_points).mean(axis=0)
        target = obs.T_applied_B.apply(out.site_transforms[2].translation)
        assert np.linalg.norm(placed - target) < 0.3


class TestDatasetIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        recs = generate_dataset(5, 2, seed=0)
        write_dataset(recs, tmp_path / "ds", config={"seed": 0})
        back = read_dataset(tmp_path / "ds")
        assert len(back) == 5
        for a, b in zip(recs, back):
            np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
            np.testing.assert_array_equal(a.cloud.segment, b.cloud.segment)
            assert a.mode_id == b.mode_id
            for ta, tb in zip(a.site_transforms, b.site_transforms):
                np.testing.assert_array_equal(
                    ta.as_matrix().astype(np.float32), tb.as_matrix().astype(np.float32)
                )

    def test_generate_deterministic(self):
        a = generate_dataset(3, 2, seed=7)
        b = generate_dataset(3, 2, seed=7)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.cloud.points, rb.cloud.points)
            assert ra.mode_id == rb.mode_id

    def test_generate_seed_changes_data(self):
        a = generate_dataset(1, 2, seed=7)[0]
        b = generate_dataset(1, 2, seed=8)[0]
        assert not np.array_equal(a.cloud.points, b.cloud.points)

    def test_version_check(self, tmp_path):
        recs = generate_dataset(1, 2, seed=0)
        write_dataset(recs, tmp_path / "ds")
        import json

        mpath = tmp_path / "ds" / "manifest.json"
        m = json.loads(mpath.read_text())
        m["version"] = "other"
        mpath.write_text(json.dumps(m))
        with pytest.raises(VersionMismatchError):
            read_dataset(tmp_path / "ds")

    def test_distractor_roundtrip(self, tmp_path):
        recs = generate_dataset(2, 2, seed=3, distractors=1)
        write_dataset(recs, tmp_path / "ds")
        back = read_dataset(tmp_path / "ds")
        assert back[0].num_sites == 3
