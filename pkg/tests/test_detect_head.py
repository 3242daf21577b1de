import math

import numpy as np
import pytest

from mgaf import autodiff as ad
from mgaf import detect_head as dh
from mgaf.types import Box3D, MapGeometry

GEOM = MapGeometry(shape=(32, 32), x_min=0.0, y_min=-8.0, cell_x=0.5, cell_y=0.5, stride=8)
CODEC = dh.RotBinCodec(12)


def box_at(px, py, l=4.0, w=2.0, h=1.5, theta=0.3, cls=0):
    """Box whose center lands at pixel-space coordinates (px, py)."""
    return Box3D(GEOM.x_min + px * GEOM.cell_x, GEOM.y_min + py * GEOM.cell_y,
                 0.2, l, w, h, theta, cls)


class TestRotCodec:
    def test_theta_zero(self):
        b, r = CODEC.encode(0.0)
        assert b == 0 and r == pytest.approx(-1.0)

    def test_theta_pi(self):
        b, r = CODEC.encode(math.pi)
        assert b == 6 and r == pytest.approx(-1.0)

    def test_roundtrip_1000(self):
        rng = np.random.default_rng(0)
        for theta in rng.uniform(0, 2 * math.pi, 1000):
            b, r = CODEC.encode(theta)
            assert 0 <= b < 12 and -1.0 - 1e-12 <= r <= 1.0 + 1e-12
            assert CODEC.decode(b, r) == pytest.approx(theta, abs=1e-6)


class TestBuildTargets:
    def test_center_pixel_is_one_and_gaussian_falls_off(self):
        box = box_at(10.5, 12.5)
        t = dh.build_targets([box], 1, GEOM, CODEC)
        assert t.heatmap[0, 10, 12] == 1.0
        assert t.n_objects == 1
        r = max(1.0, dh.gaussian_radius(box.l / GEOM.cell_x, box.w / GEOM.cell_y))
        sigma = r / 3.0
        want = math.exp(-1.0 / (2.0 * sigma * sigma))
        assert t.heatmap[0, 11, 12] == pytest.approx(want, rel=1e-6)
        assert np.max(t.heatmap) == 1.0

    def test_offset_is_fractional_part(self):
        t = dh.build_targets([box_at(10.25, 12.75)], 1, GEOM, CODEC)
        assert t.offset[0, 10, 12] == pytest.approx(0.25, abs=1e-6)
        assert t.offset[1, 10, 12] == pytest.approx(0.75, abs=1e-6)
        assert t.zmap[0, 10, 12] == pytest.approx(0.2)
        np.testing.assert_allclose(t.sizemap[:, 10, 12], [4.0, 2.0, 1.5], rtol=1e-6)

    def test_distinct_centers_give_n_ones(self):
        boxes = [box_at(5.5, 5.5), box_at(20.5, 8.5), box_at(12.5, 25.5)]
        t = dh.build_targets(boxes, 1, GEOM, CODEC)
        assert t.n_objects == 3
        assert int((t.heatmap == 1.0).sum()) == 3
        assert t.center_mask.sum() == 3

    def test_colliding_centers_keep_larger_footprint(self):
        small = box_at(10.2, 12.2, l=3.0, w=1.5, theta=0.0)
        large = box_at(10.7, 12.7, l=4.5, w=2.0, theta=0.0)
        t = dh.build_targets([small, large], 1, GEOM, CODEC)
        assert t.n_objects == 1
        assert t.sizemap[0, 10, 12] == pytest.approx(4.5)
        assert t.offset[0, 10, 12] == pytest.approx(0.7, abs=1e-6)

    def test_heatmap_max_merge_never_exceeds_one(self):
        rng = np.random.default_rng(1)
        boxes = [box_at(rng.uniform(2, 30), rng.uniform(2, 30)) for _ in range(12)]
        t = dh.build_targets(boxes, 1, GEOM, CODEC)
        assert np.max(t.heatmap) <= 1.0

    def test_mask_target_included(self):
        t = dh.build_targets([box_at(10.5, 12.5)], 1, GEOM, CODEC)
        assert t.mask_target.shape == (1, 32, 32)
        assert t.mask_target.sum() > 0


class TestClsFocalLoss:
    def test_perfect_prediction_near_zero(self):
        # hard 1 at the center, hard 0 elsewhere, clamped into (0, 1)
        target = np.zeros((1, 16, 16), np.float64)
        target[0, 4, 7] = 1.0
        p_hat = ad.Var(np.clip(target, 1e-6, 1 - 1e-6))
        loss = float(dh.cls_focal_loss(p_hat, target, 1).value)
        assert loss <= 10e-6

    def test_single_pixel_closed_form(self):
        target = np.ones((1, 1, 1), np.float64)
        p_hat = ad.Var(np.full((1, 1, 1), 0.5))
        loss = float(dh.cls_focal_loss(p_hat, target, 1).value)
        assert loss == pytest.approx(0.25 * math.log(2), rel=1e-9)

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(2)
        small = MapGeometry((8, 8), 0.0, -2.0, 0.5, 0.5, 8)
        boxes = [
            Box3D(small.x_min + 3.5 * 0.5, small.y_min + 4.5 * 0.5, 0.2, 2.0, 1.0, 1.5, 0.3, 0),
            Box3D(small.x_min + 5.2 * 0.5, small.y_min + 6.8 * 0.5, 0.2, 2.0, 1.0, 1.5, 1.3, 0),
        ]
        target = dh.build_targets(boxes, 1, small, CODEC)
        assert target.n_objects == 2
        p = rng.uniform(0.02, 0.98, size=(1, 8, 8))
        got = float(dh.cls_focal_loss(ad.Var(p), target.heatmap, target.n_objects).value)
        want = 0.0
        t = target.heatmap.astype(np.float64)
        for i in np.ndindex(t.shape):
            if t[i] >= 1.0:
                want += (1 - p[i]) ** 2 * math.log(p[i])
            else:
                want += (1 - t[i]) ** 4 * p[i] ** 2 * math.log(1 - p[i])
        want = -want / target.n_objects
        assert got == pytest.approx(want, rel=1e-9)

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        target = np.zeros((1, 4, 4))
        target[0, 1, 1] = 1.0
        target[0, 1, 2] = 0.6
        p = rng.uniform(0.1, 0.9, size=(1, 4, 4))
        ad.gradcheck_scalar_fn(lambda v: dh.cls_focal_loss(v[0], target, 1), [p])


class TestCenterL1:
    def test_exact_match_zero(self):
        t = dh.build_targets([box_at(10.5, 12.5)], 1, GEOM, CODEC)
        loss = dh.center_l1_loss(ad.Var(t.offset.astype(np.float64)), t.offset,
                                 t.center_mask, t.n_objects)
        assert float(loss.value) == 0.0

    def test_quarter_offsets_sum(self):
        t = dh.build_targets([box_at(10.5, 12.5)], 1, GEOM, CODEC)
        pred = t.offset.astype(np.float64).copy()
        pred[:, 10, 12] += 0.25
        loss = dh.center_l1_loss(ad.Var(pred), t.offset, t.center_mask, 1)
        assert float(loss.value) == pytest.approx(0.5, abs=1e-7)

    def test_random_matches_masked_sum(self):
        rng = np.random.default_rng(4)
        t = dh.build_targets([box_at(4.5, 9.5), box_at(20.5, 20.5)], 1, GEOM, CODEC)
        pred = rng.normal(size=(3, 32, 32))
        got = float(dh.center_l1_loss(ad.Var(pred), t.sizemap, t.center_mask, 2).value)
        want = np.abs(pred - t.sizemap)[:, t.center_mask].sum() / 2
        assert got == pytest.approx(want, rel=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        t = dh.build_targets([box_at(4.5, 9.5)], 1, GEOM, CODEC)
        pred = rng.normal(size=(2, 32, 32))
        ad.gradcheck_scalar_fn(
            lambda v: dh.center_l1_loss(v[0], t.offset, t.center_mask, 1), [pred]
        )


class TestRotLoss:
    def _bundle(self, thetas, pixels):
        boxes = [box_at(px, py, theta=th) for (px, py), th in zip(pixels, thetas)]
        return dh.build_targets(boxes, 1, GEOM, CODEC)

    def test_uniform_logits_give_log_b(self):
        t = self._bundle([0.4], [(10.5, 12.5)])
        logits = ad.Var(np.zeros((12, 32, 32)))
        res = np.zeros((12, 32, 32))
        res[t.rot_bin[10, 12], 10, 12] = t.rot_res[10, 12]
        loss = dh.rot_loss(logits, ad.Var(res), t.rot_bin, t.rot_res, t.center_mask, 1)
        assert float(loss.value) == pytest.approx(math.log(12), rel=1e-9)

    def test_saturated_correct_prediction_vanishes(self):
        t = self._bundle([2.0], [(10.5, 12.5)])
        logits = np.zeros((12, 32, 32))
        logits[t.rot_bin[10, 12], 10, 12] = 50.0
        res = np.zeros((12, 32, 32))
        res[t.rot_bin[10, 12], 10, 12] = t.rot_res[10, 12]
        loss = dh.rot_loss(ad.Var(logits), ad.Var(res), t.rot_bin, t.rot_res, t.center_mask, 1)
        assert float(loss.value) < 1e-9

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(6)
        t = self._bundle([0.7, 4.1], [(4.5, 9.5), (20.5, 20.5)])
        logits = rng.normal(size=(12, 32, 32))
        res = rng.normal(size=(12, 32, 32))
        got = float(
            dh.rot_loss(ad.Var(logits), ad.Var(res), t.rot_bin, t.rot_res, t.center_mask, 2).value
        )
        want = 0.0
        for u, v in np.argwhere(t.center_mask):
            lg = logits[:, u, v]
            b = t.rot_bin[u, v]
            ce = math.log(np.exp(lg).sum()) - lg[b]
            want += ce + abs(res[b, u, v] - t.rot_res[u, v])
        want /= 2
        assert got == pytest.approx(want, rel=1e-9)

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        t = self._bundle([1.2], [(10.5, 12.5)])
        logits = rng.normal(size=(12, 32, 32))
        res = rng.normal(size=(12, 32, 32))
        ad.gradcheck_scalar_fn(
            lambda v: dh.rot_loss(v[0], v[1], t.rot_bin, t.rot_res, t.center_mask, 1),
            [logits, res],
        )


class TestCorners:
    def test_unit_cube(self):
        c = dh.corners_of(Box3D(0, 0, 0, 1, 1, 1, 0.0))
        assert c.shape == (8, 3)
        assert set(map(tuple, np.round(c, 9))) == {
            (sx * 0.5, sy * 0.5, sz * 0.5) for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)
        }
        # canonical order: bit0 flips the l sign first
        np.testing.assert_allclose(c[0], [0.5, 0.5, 0.5])
        np.testing.assert_allclose(c[1], [-0.5, 0.5, 0.5])

    def test_quarter_turn_moves_corner(self):
        c = dh.corners_of(Box3D(0, 0, 0, 2.0, 1.0, 1.0, math.pi / 2))
        # the (+l/2, +w/2) corner rotates to (-w/2, +l/2)
        np.testing.assert_allclose(c[0][:2], [-0.5, 1.0], atol=1e-12)

    def test_centroid_equals_center(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            b = Box3D(*rng.uniform(-5, 5, 3), *rng.uniform(0.5, 4, 3), rng.uniform(0, 6.28))
            np.testing.assert_allclose(dh.corners_of(b).mean(axis=0), [b.x, b.y, b.z], atol=1e-9)


class TestCornerLoss:
    def _heads_from_targets(self, t, dtype=np.float64):
        return {
            "offset": ad.Var(t.offset.astype(dtype)),
            "z": ad.Var(t.zmap.astype(dtype)),
            "size": ad.Var(t.sizemap.astype(dtype)),
            "rot_res": ad.Var(np.tile(t.rot_res[None], (12, 1, 1)).astype(dtype)),
        }

    def test_identical_boxes_zero(self):
        box = box_at(10.25, 12.75, theta=0.9)
        t = dh.build_targets([box], 1, GEOM, CODEC)
        heads = self._heads_from_targets(t)
        corners = dh.decode_center_corners(heads, t, GEOM, CODEC)
        loss = dh.corner_loss(corners, [box], 1)
        assert float(loss.value) < 1e-6

    def test_translation_by_one_meter_gives_eight(self):
        box = box_at(10.25, 12.75, theta=0.9)
        t = dh.build_targets([box], 1, GEOM, CODEC)
        heads = self._heads_from_targets(t)
        corners = dh.decode_center_corners(heads, t, GEOM, CODEC)
        moved = Box3D(box.x - 1.0, box.y, box.z, box.l, box.w, box.h, box.theta)
        loss = dh.corner_loss(corners, [moved], 1)
        assert float(loss.value) == pytest.approx(8.0, abs=1e-5)

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(9)
        boxes = [box_at(4.5, 9.5, theta=0.3), box_at(20.5, 20.5, theta=5.1)]
        t = dh.build_targets(boxes, 1, GEOM, CODEC)
        heads = self._heads_from_targets(t)
        for k in heads:
            heads[k] = ad.Var(heads[k].value + rng.normal(0, 0.1, heads[k].value.shape))
        corners = dh.decode_center_corners(heads, t, GEOM, CODEC)
        # gt list must follow row-major center order
        order = sorted(range(2), key=lambda i: (
            int((boxes[i].x - GEOM.x_min) / GEOM.cell_x) * 32
            + int((boxes[i].y - GEOM.y_min) / GEOM.cell_y)
        ))
        gt_sorted = [boxes[i] for i in order]
        got = float(dh.corner_loss(corners, gt_sorted, 2).value)
        want = 0.0
        for i, b in enumerate(gt_sorted):
            gt_c = dh.corners_of(b)
            want += np.linalg.norm(corners.value[i] - gt_c, axis=1).sum()
        want /= 2
        assert got == pytest.approx(want, rel=1e-9)

    def test_gradcheck_through_decode(self):
        rng = np.random.default_rng(10)
        box = box_at(10.25, 12.75, theta=0.9)
        t = dh.build_targets([box], 1, GEOM, CODEC)
        moved = Box3D(box.x - 0.4, box.y + 0.2, box.z + 0.1, box.l, box.w, box.h, box.theta + 0.2)

        base = self._heads_from_targets(t)

        def fn(v):
            heads = {"offset": v[0], "z": v[1], "size": v[2], "rot_res": v[3]}
            corners = dh.decode_center_corners(heads, t, GEOM, CODEC)
            return dh.corner_loss(corners, [moved], 1)

        inputs = [base["offset"].value + rng.normal(0, 0.05, (2, 32, 32)),
                  base["z"].value + rng.normal(0, 0.05, (1, 32, 32)),
                  base["size"].value + np.abs(rng.normal(0, 0.05, (3, 32, 32))),
                  base["rot_res"].value + rng.normal(0, 0.05, (12, 32, 32))]
        ad.gradcheck_scalar_fn(fn, inputs, max_entries=40, rng=rng)


class TestBoxLoss:
    def test_all_zero(self):
        z = ad.as_var(np.zeros(()))
        assert float(dh.box_loss(z, z, z, z, z).value) == 0.0

    def test_weighted_sum(self):
        parts = [ad.as_var(np.array(v)) for v in (0.1, 0.2, 0.3, 0.4, 0.5)]
        assert float(dh.box_loss(*parts).value) == pytest.approx(1.5, rel=1e-12)
        assert float(
            dh.box_loss(*parts, gammas=(1.0, 1.0, 1.0, 1.0, 0.0)).value
        ) == pytest.approx(1.0, rel=1e-12)

    def test_zero_corner_gamma_kills_corner_gradient(self):
        rng = np.random.default_rng(11)
        box = box_at(10.25, 12.75, theta=0.9)
        t = dh.build_targets([box], 1, GEOM, CODEC)
        moved = Box3D(box.x - 0.4, box.y, box.z, box.l, box.w, box.h, box.theta)
        size_in = ad.Var(t.sizemap.astype(np.float64) + 0.1, requires_grad=True)
        heads = {
            "offset": ad.Var(t.offset.astype(np.float64)),
            "z": ad.Var(t.zmap.astype(np.float64)),
            "size": size_in,
            "rot_res": ad.Var(np.tile(t.rot_res[None], (12, 1, 1)).astype(np.float64)),
        }
        corners = dh.decode_center_corners(heads, t, GEOM, CODEC)
        lc = dh.corner_loss(corners, [moved], 1)
        zero = ad.as_var(np.zeros(()))
        total = dh.box_loss(zero, zero, zero, zero, lc, gammas=(1, 1, 1, 1, 0.0))
        ad.backward(total)
        assert size_in.grad is None or np.all(size_in.grad == 0)
