import math

import numpy as np
import pytest

from mgaf import data_ingest as di
from mgaf.iou_conf import RotatedRect, iou_bev
from mgaf.types import Box3D, DataError, PointCloud, Scene, VoxelGridSpec

KITTI_SPEC = VoxelGridSpec(
    range_min=(0.0, -40.0, -3.0), range_max=(70.4, 40.0, 1.0), d=(0.05, 0.05, 0.1)
)


def make_scene(pts, boxes, frame="000000"):
    return Scene(cloud=PointCloud(np.asarray(pts, np.float32)), gt_boxes=boxes, frame_id=frame)


class TestKittiIO:
    def test_bin_roundtrip(self, tmp_path):
        pts = np.array(
            [[0, 0, 0, 0.5], [1, 2, 3, 0.1], [4, 5, 6, 0.9], [-1, -2, -3, 0.0]],
            dtype=np.float32,
        )
        p = tmp_path / "000000.bin"
        p.write_bytes(pts.astype("<f4").tobytes())
        cloud = di.read_velodyne_bin(p)
        assert len(cloud) == 4
        np.testing.assert_array_equal(cloud.points, pts)

    def test_bin_bad_length_names_offset(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * 35)
        with pytest.raises(DataError, match="offset 32"):
            di.read_velodyne_bin(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            di.read_velodyne_bin(tmp_path / "nope.bin")

    def test_label_line_camera_to_lidar(self, tmp_path):
        p = tmp_path / "000000.txt"
        p.write_text("Car 0 0 0 0 0 0 0 1.5 1.6 4.0 2.0 1.0 10.0 0\n")
        rows = di.read_kitti_labels(p)
        assert len(rows) == 1
        box = rows[0][0]
        assert (box.h, box.w, box.l) == (1.5, 1.6, 4.0)
        # camera (2, 1, 10) -> lidar (10, -2, -1), bottom lifted by h/2
        assert box.x == pytest.approx(10.0)
        assert box.y == pytest.approx(-2.0)
        assert box.z == pytest.approx(-1.0 + 0.75)
        # ry = 0 -> yaw -pi/2 normalized into [0, 2pi)
        assert box.theta == pytest.approx(1.5 * math.pi)

    def test_empty_label_file(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("")
        assert di.read_kitti_labels(p) == []

    def test_dontcare_dropped(self, tmp_path):
        p = tmp_path / "d.txt"
        p.write_text(
            "DontCare -1 -1 -10 0 0 0 0 -1 -1 -1 -1000 -1000 -1000 -10\n"
            "Car 0 0 0 0 0 0 0 1.5 1.6 4.0 2.0 1.0 10.0 0\n"
        )
        assert len(di.read_kitti_labels(p)) == 1

    def test_malformed_line_names_line_number(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("Car 0 0 0 0 0 0 0 1.5 1.6 4.0 2.0 1.0 10.0 0\nCar 1 2\n")
        with pytest.raises(DataError, match=":2:"):
            di.read_kitti_labels(p)

    def test_scene_write_read_roundtrip(self, tmp_path):
        boxes = [
            Box3D(10.0, -2.0, 0.25, 4.0, 1.6, 1.5, 0.3, 0),
            Box3D(5.0, 3.0, -0.5, 0.8, 0.6, 1.7, 4.0, 1),
        ]
        pts = np.array([[1, 2, 3, 0.5], [4, 5, 6, 0.25]], dtype=np.float32)
        scene = make_scene(pts, boxes, "000042")
        di.write_scene(tmp_path, scene)
        back = di.read_kitti_scene(tmp_path / "000042.bin", tmp_path / "000042.txt")
        np.testing.assert_array_equal(back.cloud.points, pts)
        assert len(back.gt_boxes) == 2
        for a, b in zip(boxes, back.gt_boxes):
            for attr in ("x", "y", "z", "l", "w", "h"):
                assert getattr(b, attr) == pytest.approx(getattr(a, attr), abs=2e-6)
            assert b.theta == pytest.approx(a.theta, abs=2e-6)
            assert b.class_id == a.class_id


class TestCrop:
    def test_upper_bound_removed(self):
        scene = make_scene([[80, 0, 0, 0.1]], [])
        assert len(di.crop_to_range(scene, KITTI_SPEC).cloud) == 0

    def test_half_open_boundaries(self):
        scene = make_scene([[0, 0, -3, 0.1], [0, 0, 1.0, 0.1]], [])
        out = di.crop_to_range(scene, KITTI_SPEC)
        assert len(out.cloud) == 1
        assert out.cloud.points[0, 2] == -3

    def test_inside_identity(self):
        pts = [[1, 2, 0, 0.5], [30, -10, -1, 0.2]]
        boxes = [Box3D(10, 0, -1, 4, 2, 1.5, 0.0, 0)]
        scene = make_scene(pts, boxes)
        out = di.crop_to_range(scene, KITTI_SPEC)
        np.testing.assert_array_equal(out.cloud.points, scene.cloud.points)
        assert out.gt_boxes == boxes

    def test_box_center_outside_removed(self):
        boxes = [Box3D(75.0, 0, -1, 4, 2, 1.5, 0.0, 0)]
        out = di.crop_to_range(make_scene([[1, 1, 0, 0.1]], boxes), KITTI_SPEC)
        assert out.gt_boxes == []


class TestAugment:
    no_sampling = di.AugmentConfig(gt_sampling=False, flip_prob=1.0,
                                   scale_range=(1.0, 1.0), rot_range=(0.0, 0.0))

    def test_flip(self):
        box = Box3D(5.0, 2.0, 0.0, 4, 2, 1.5, math.pi / 2, 0)
        out = di.augment(make_scene([[1, 1, 0, 0.5]], [box]), None,
                         np.random.default_rng(0), self.no_sampling)
        b = out.gt_boxes[0]
        assert (b.x, b.y) == (5.0, -2.0)
        assert b.theta == pytest.approx(1.5 * math.pi)
        assert out.cloud.points[0, 1] == -1

    def test_scale(self):
        cfg = di.AugmentConfig(gt_sampling=False, flip_prob=0.0,
                               scale_range=(1.05, 1.05), rot_range=(0.0, 0.0))
        box = Box3D(5.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.0, 0)
        out = di.augment(make_scene([[1, 1, 0, 0.5]], [box]), None,
                         np.random.default_rng(0), cfg)
        b = out.gt_boxes[0]
        assert b.l == pytest.approx(4.2)
        assert b.x == pytest.approx(5.25)

    def test_rotation(self):
        cfg = di.AugmentConfig(gt_sampling=False, flip_prob=0.0,
                               scale_range=(1.0, 1.0),
                               rot_range=(math.pi / 4, math.pi / 4))
        out = di.augment(make_scene([[1, 0, 0, 0.5]], []), None,
                         np.random.default_rng(0), cfg)
        np.testing.assert_allclose(
            out.cloud.points[0, :3], [math.sqrt(2) / 2, math.sqrt(2) / 2, 0], atol=1e-6
        )

    def test_membership_preserved_over_random_scenes(self):
        rng = np.random.default_rng(11)
        cfg = di.AugmentConfig(gt_sampling=False)
        for _ in range(100):
            scene = di.synth_scene(rng, di.SynthConfig())
            inside_before = [
                di.points_in_box(scene.cloud.xyz, b) for b in scene.gt_boxes
            ]
            out = di.augment(scene, None, rng, cfg)
            for box, mask in zip(out.gt_boxes, inside_before):
                if mask.any():
                    # small slack for float32 round-off at box faces
                    grown = Box3D(box.x, box.y, box.z, box.l + 2e-4, box.w + 2e-4,
                                  box.h + 2e-4, box.theta, box.class_id)
                    assert di.points_in_box(out.cloud.xyz[mask], grown).all()

    def test_gt_sampling_never_overlaps(self):
        rng = np.random.default_rng(5)
        base_scenes = [di.synth_scene(rng, di.SynthConfig()) for _ in range(6)]
        db = di.build_gt_database(base_scenes)
        cfg = di.AugmentConfig(gt_sampling=True, max_paste=4, flip_prob=0.0,
                               scale_range=(1.0, 1.0), rot_range=(0.0, 0.0))
        for _ in range(20):
            scene = di.synth_scene(rng, di.SynthConfig())
            out = di.augment(scene, db, rng, cfg)
            assert len(out.gt_boxes) >= len(scene.gt_boxes)
            rects = [RotatedRect(b.x, b.y, b.l, b.w, b.theta) for b in out.gt_boxes]
            for i in range(len(rects)):
                for j in range(i + 1, len(rects)):
                    assert iou_bev(rects[i], rects[j]) == 0.0

    def test_determinism(self):
        rng = np.random.default_rng(3)
        scenes = [di.synth_scene(rng, di.SynthConfig()) for _ in range(3)]
        db = di.build_gt_database(scenes)
        a = di.augment(scenes[0], db, np.random.default_rng(99), di.AugmentConfig())
        b = di.augment(scenes[0], db, np.random.default_rng(99), di.AugmentConfig())
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
        assert a.gt_boxes == b.gt_boxes


class TestSynth:
    def test_deterministic(self):
        a = di.synth_scene(np.random.default_rng(0), di.SynthConfig(n_objects=(1, 1)))
        b = di.synth_scene(np.random.default_rng(0), di.SynthConfig(n_objects=(1, 1)))
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
        assert a.gt_boxes == b.gt_boxes

    def test_no_objects_gives_clutter_only(self):
        scene = di.synth_scene(np.random.default_rng(0), di.SynthConfig(n_objects=(0, 0)))
        assert scene.gt_boxes == []
        assert len(scene.cloud) == di.SynthConfig().clutter_points

    def test_seeds_differ(self):
        cfg = di.SynthConfig(n_objects=(5, 5), x_range=(2.0, 30.0), y_range=(-15, 15))
        a = di.synth_scene(np.random.default_rng(0), cfg)
        b = di.synth_scene(np.random.default_rng(1), cfg)
        ca = sorted((bx.x, bx.y) for bx in a.gt_boxes)
        cb = sorted((bx.x, bx.y) for bx in b.gt_boxes)
        assert ca != cb

    def test_infeasible_raises(self):
        cfg = di.SynthConfig(
            n_objects=(20, 20), x_range=(2.0, 4.0), y_range=(-1.0, 1.0), max_retries=5
        )
        with pytest.raises(di.GenerationError):
            di.synth_scene(np.random.default_rng(0), cfg)

    def test_object_centers_empty_in_bev(self):
        # surface-only sampling: no points near the box center column
        scene = di.synth_scene(np.random.default_rng(4), di.SynthConfig(n_objects=(1, 1)))
        box = scene.gt_boxes[0]
        xyz = scene.cloud.xyz
        d = np.hypot(xyz[:, 0] - box.x, xyz[:, 1] - box.y)
        assert d.min() > 0.2

    def test_gt_database_entries_have_points(self):
        rng = np.random.default_rng(6)
        scenes = [di.synth_scene(rng, di.SynthConfig()) for _ in range(4)]
        db = di.build_gt_database(scenes)
        assert db.classes() == [0]
        for entry in db.entries[0]:
            assert len(entry.points_local) >= 1
            assert np.all(np.abs(entry.points_local[:, 0]) <= entry.box.l / 2 + 1e-5)
