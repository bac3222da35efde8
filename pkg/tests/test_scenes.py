import numpy as np
import pytest

from pasdet import geometry as geo
from pasdet import scenes as S
from pasdet.detect import iou_aabb


def wall_scene():
    """Camera 3 m in front of a box much larger than its view frustum."""
    cam = geo.CameraIntrinsics.from_fov(24, 16, 60.0)
    pose = geo.Pose.look_at([5.0, 1.0, 5.0], [5.0, 9.0, 5.0])
    wall = S.LabeledBox(np.array([5.0, 5.0, 5.0]), np.array([9.0, 2.0, 9.0]), 1, (0.1, 0.2, 0.3))
    return S.Scene(np.zeros(3), np.full(3, 10.0), [wall], [S.View(cam, pose)], 2)


class TestGenerate:
    def test_empty_room(self):
        scene = S.generate_scene(n_boxes=0, n_views=2, resolution=(16, 16))
        assert scene.boxes == []
        np.testing.assert_array_equal(S.gt_depth_map(scene, 0), scene.z_max)
        np.testing.assert_array_equal(S.gt_semantic_map(scene, 1), scene.background_label)
        np.testing.assert_array_equal(S.gt_color_map(scene, 0), np.broadcast_to(S.BACKGROUND, (16, 16, 3)))

    def test_seed_determinism(self, tmp_path):
        a = S.generate_scene(n_boxes=4, seed=11, resolution=(16, 16))
        b = S.generate_scene(n_boxes=4, seed=11, resolution=(16, 16))
        S.save_scene(a, tmp_path / "a.scene")
        S.save_scene(b, tmp_path / "b.scene")
        assert (tmp_path / "a.scene").read_bytes() == (tmp_path / "b.scene").read_bytes()
        c = S.generate_scene(n_boxes=4, seed=12, resolution=(16, 16))
        assert not np.allclose(a.boxes[0].center, c.boxes[0].center)

    @pytest.mark.parametrize("seed", range(10))
    def test_boxes_disjoint_and_inside(self, seed):
        scene = S.generate_scene(n_boxes=4, n_classes=5, seed=seed, n_views=1, resolution=(8, 8))
        boxes = scene.gt_boxes()
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert iou_aabb(boxes[i], boxes[j]) == 0.0
        for b in scene.boxes:
            assert np.all(b.aabb.lo >= scene.room_lo) and np.all(b.aabb.hi <= scene.room_hi)
            assert b.aabb.lo[2] == pytest.approx(0.0, abs=1e-12)
            assert 0 <= b.class_id < 5

    def test_cameras_outside_boxes_and_facing_in(self, small_scene):
        eyes = np.array([v.pose.translation for v in small_scene.views])
        for b in small_scene.boxes:
            assert not np.any(b.aabb.contains(eyes))
        center = 0.5 * (small_scene.room_lo + small_scene.room_hi)
        for v in small_scene.views:
            forward = v.pose.rotation[:, 2]
            assert forward @ (center - v.pose.translation) > 0

    def test_placement_failure(self):
        with pytest.raises(S.GenerationError):
            S.generate_scene(n_boxes=40, n_views=1, max_attempts=50)

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            S.generate_scene(n_views=0)

    def test_scene_invariants(self):
        view = wall_scene().views
        box = S.LabeledBox(np.array([1.0, 1, 1]), np.ones(3), 3, (0, 0, 0))
        with pytest.raises(ValueError):
            S.Scene(np.zeros(3), np.full(3, 4.0), [box], view, 3)
        outside = S.LabeledBox(np.array([3.9, 1, 1]), np.ones(3), 0, (0, 0, 0))
        with pytest.raises(ValueError):
            S.Scene(np.zeros(3), np.full(3, 4.0), [outside], view, 3)
        with pytest.raises(ValueError):
            S.Scene(np.zeros(3), np.full(3, 4.0), [], [], 3)

    def test_holdout_split(self):
        scene = S.generate_scene(n_boxes=1, n_views=8, resolution=(8, 8))
        assert scene.eval_views() == [0, 4]
        assert scene.train_views() == [1, 2, 3, 5, 6, 7]


class TestGroundTruthMaps:
    def test_frontal_wall(self):
        # depth is ray distance, so the camera-z component is the constant wall distance
        scene = wall_scene()
        depth = S.gt_depth_map(scene, 0)
        _, dirs = geo.pixel_grid_rays(scene.views[0].camera, scene.views[0].pose)
        forward = scene.views[0].pose.rotation[:, 2]
        np.testing.assert_allclose(depth * (dirs @ forward), 3.0, atol=1e-12)
        np.testing.assert_array_equal(S.gt_semantic_map(scene, 0), 1)
        np.testing.assert_array_equal(S.gt_color_map(scene, 0), np.broadcast_to((0.1, 0.2, 0.3), (16, 24, 3)))

    def test_against_step_march(self, small_scene, rng):
        view = small_scene.views[1]
        depth = S.gt_depth_map(small_scene, 1)
        origins, dirs = geo.pixel_grid_rays(view.camera, view.pose)
        step = 2e-3
        ts = np.arange(0.0, small_scene.z_max, step)
        for flat in rng.choice(depth.size, 150, replace=False):
            r, c = divmod(int(flat), depth.shape[1])
            pts = origins[r, c] + ts[:, None] * dirs[r, c]
            inside = S.gt_occupancy(small_scene, pts)
            if inside.any():
                t = ts[np.argmax(inside)]
                assert t - step <= depth[r, c] <= t + 1e-12
            else:
                assert depth[r, c] == small_scene.z_max

    @pytest.mark.parametrize("seed", range(5))
    def test_tri_oracle_consistency(self, seed):
        scene = S.generate_scene(n_boxes=3, seed=seed, n_views=3, resolution=(32, 32))
        for i in range(3):
            depth = S.gt_depth_map(scene, i)
            sem = S.gt_semantic_map(scene, i)
            col = S.gt_color_map(scene, i)
            hit = depth < scene.z_max
            assert np.array_equal(hit, sem != scene.background_label)
            assert np.array_equal(hit, np.any(col != np.asarray(S.BACKGROUND), axis=-1))

    def test_depth_space(self, small_scene):
        ds = S.depth_space(small_scene, n_bins=16)
        nearest = min(S.gt_depth_map(small_scene, i)[S.gt_semantic_map(small_scene, i) < 3].min()
                      for i in range(len(small_scene.views)))
        assert ds.z_min == pytest.approx(0.9 * nearest)
        assert ds.z_max == small_scene.z_max
        assert ds.n_bins == 16

    def test_multi_view_reprojection(self):
        scene = S.generate_scene(n_boxes=3, seed=5, n_views=20, resolution=(64, 64))
        checked = 0
        for b in scene.boxes:
            seen = []
            for v in scene.views:
                p = geo.world_to_pixel(v.camera, v.pose, b.center)
                if p.in_front and 0 <= p.pixel[0] + 0.5 < 64 and 0 <= p.pixel[1] + 0.5 < 64:
                    seen.append((v, p))
            for (va, pa), (vb, pb) in zip(seen, seen[1:]):
                ray = geo.pixel_to_ray(va.camera, va.pose, pa.pixel)
                forward = va.pose.rotation[:, 2]
                point = ray.at(pa.depth / (ray.direction @ forward))
                again = geo.world_to_pixel(vb.camera, vb.pose, point)
                assert np.linalg.norm(again.pixel - pb.pixel) <= 1.0
                checked += 1
        assert checked > 0


class TestProjectSemantics:
    CAM = geo.CameraIntrinsics.from_fov(32, 32, 60.0)
    POSE = geo.Pose.identity()

    def test_single_point_on_axis(self):
        pts = S.LabeledPointSet([[0.0, 0.0, 2.0]], [2])
        out = S.project_semantics(pts, self.CAM, self.POSE)
        assert (out != S.IGNORE).sum() == 1
        assert out[int(self.CAM.cy), int(self.CAM.cx)] == 2

    def test_nearer_point_wins(self):
        pts = S.LabeledPointSet([[0.0, 0.0, 3.0], [0.0, 0.0, 1.5]], [0, 1])
        out = S.project_semantics(pts, self.CAM, self.POSE)
        assert out[out != S.IGNORE].tolist() == [1]

    def test_tie_goes_to_lower_index(self):
        pts = S.LabeledPointSet([[0.0, 0.0, 2.0], [0.0, 0.0, 2.0]], [4, 3])
        out = S.project_semantics(pts, self.CAM, self.POSE)
        assert out[out != S.IGNORE].tolist() == [4]

    def test_behind_and_outside_are_ignored(self):
        pts = S.LabeledPointSet([[0.0, 0.0, -2.0], [50.0, 0.0, 1.0]], [0, 0])
        out = S.project_semantics(pts, self.CAM, self.POSE)
        assert np.all(out == S.IGNORE)

    def test_empty(self):
        out = S.project_semantics(S.LabeledPointSet(np.zeros((0, 3)), []), self.CAM, self.POSE)
        assert np.all(out == S.IGNORE)

    def test_label_validation(self):
        with pytest.raises(ValueError):
            S.LabeledPointSet([[0, 0, 1]], [-1])
        with pytest.raises(ValueError):
            S.LabeledPointSet([[0, 0, 1], [0, 0, 2]], [0])

    @pytest.mark.parametrize("seed", range(5))
    def test_agrees_with_ray_casting(self, seed):
        # splats label any pixel a silhouette touches while ray casting samples the
        # pixel center; 128 px keeps that boundary band a small share of the image
        scene = S.generate_scene(n_boxes=3, seed=seed, n_views=4, resolution=(128, 128))
        pts = S.sample_box_surfaces(scene, spacing=0.005)
        for i, v in enumerate(scene.views):
            splat = S.project_semantics(pts, v.camera, v.pose)
            traced = S.gt_semantic_map(scene, i)
            labeled = splat != S.IGNORE
            assert labeled.sum() > 50
            agree = (splat[labeled] == traced[labeled]).mean()
            assert agree >= 0.95, (seed, i, agree)


class TestSceneFiles:
    def test_round_trip(self, small_scene, tmp_path):
        S.save_scene(small_scene, tmp_path / "s.scene")
        back = S.load_scene(tmp_path / "s.scene")
        assert back.scene_id == "s"
        assert back.n_classes == small_scene.n_classes and back.seed == small_scene.seed
        for a, b in zip(small_scene.boxes, back.boxes):
            np.testing.assert_array_equal(a.center, b.center)
            np.testing.assert_array_equal(a.size, b.size)
            assert a.class_id == b.class_id and a.color == b.color
        for i in range(len(small_scene.views)):
            np.testing.assert_array_equal(S.gt_depth_map(small_scene, i), S.gt_depth_map(back, i))
        S.save_scene(back, tmp_path / "t.scene")
        assert (tmp_path / "s.scene").read_text() == (tmp_path / "t.scene").read_text()

    @pytest.mark.parametrize("mutate, line", [
        (lambda ls: ["not-a-scene"] + ls[1:], 1),
        (lambda ls: ls[:2] + ["classes three"] + ls[3:], 3),
        (lambda ls: ls + ["box 1 2 3"], None),
        (lambda ls: ls + ["sphere 1 2 3"], None),
    ])
    def test_format_errors_name_the_line(self, small_scene, tmp_path, mutate, line):
        S.save_scene(small_scene, tmp_path / "s.scene")
        lines = (tmp_path / "s.scene").read_text().splitlines()
        bad = mutate(lines)
        (tmp_path / "bad.scene").write_text("\n".join(bad) + "\n")
        expected = line if line is not None else len(bad)
        with pytest.raises(S.SceneFormatError, match=f"bad.scene:{expected}:"):
            S.load_scene(tmp_path / "bad.scene")

    def test_missing_records(self, tmp_path):
        (tmp_path / "m.scene").write_text(S.HEADER + "\nseed 3\n")
        with pytest.raises(S.SceneFormatError):
            S.load_scene(tmp_path / "m.scene")
