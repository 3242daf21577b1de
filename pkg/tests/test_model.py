import numpy as np
import pytest

from mgaf.config import Config
from mgaf.data_ingest import SynthConfig, synth_scene
from mgaf.model import Detector
from mgaf.autodiff import backward

TOY = dict(
    classes=("Car",), range_min=(0.0, -6.4, -1.0), range_max=(12.8, 6.4, 3.0),
    voxel_size=(0.4, 0.4, 0.5), backbone_channels=(4, 6, 6, 8), n_res=1,
    tower_channels=8, c2=16, head_channels=8, n_lvl=1, iou_samples_m=4,
)


@pytest.fixture(scope="module")
def scene():
    return synth_scene(np.random.default_rng(0), SynthConfig())


class TestDetector:
    def test_head_shapes(self, scene):
        model = Detector(Config(**TOY))
        vol = model.prepare_scene(scene)
        outs = model.forward(vol, train=True)
        L, W = model.geom.shape
        assert outs.heads["heatmap"].value.shape == (1, L, W)
        assert outs.heads["offset"].value.shape == (2, L, W)
        assert outs.heads["z"].value.shape == (1, L, W)
        assert outs.heads["size"].value.shape == (3, L, W)
        assert outs.heads["rot_bin"].value.shape == (12, L, W)
        assert outs.heads["rot_res"].value.shape == (12, L, W)
        assert outs.heads["iou"].value.shape == (1, L, W)
        assert outs.g.value.shape == (16, L, W)
        maps = outs.head_maps_np()
        assert np.all((maps["heatmap"] >= 0) & (maps["heatmap"] <= 1))
        assert np.all((maps["iou"] >= 0) & (maps["iou"] <= 1))

    def test_detach_iou_blocks_trunk_gradient(self, scene):
        from mgaf.detect_head import build_targets
        from mgaf import autodiff as ad

        for detach in (False, True):
            cfg = Config(**TOY, detach_iou=detach)
            model = Detector(cfg)
            vol = model.prepare_scene(scene)
            outs = model.forward(vol, train=True)
            samples = model.select_samples(outs, scene.gt_boxes)
            assert samples, "expected at least one confidence sample"
            targets = build_targets(scene.gt_boxes, 1, model.geom, model.codec)
            losses = model.compute_losses(outs, targets, samples)
            ad.zero_grads(model.store.params.values())
            backward(losses["iou"])
            trunk_w = model.store.params["tower.reduce.weight"]
            got_grad = trunk_w.grad is not None and np.any(trunk_w.grad != 0)
            assert got_grad == (not detach)

    def test_confidence_samples_capped_at_m(self, scene):
        cfg = Config(**TOY)
        model = Detector(cfg)
        vol = model.prepare_scene(scene)
        outs = model.forward(vol, train=True)
        samples = model.select_samples(outs, scene.gt_boxes)
        assert 1 <= len(samples) <= cfg.iou_samples_m
        for s in samples:
            assert 0.0 <= s.iou_target <= 1.0
            assert s.c_target == pytest.approx(min(1.0, max(0.0, 2 * s.iou_target - 0.5)))

    def test_no_gt_gives_zero_confidence_targets(self, scene):
        from dataclasses import replace

        model = Detector(Config(**TOY))
        empty = replace(scene, gt_boxes=[])
        vol = model.prepare_scene(empty)
        outs = model.forward(vol, train=True)
        samples = model.select_samples(outs, [])
        assert all(s.c_target == 0.0 for s in samples)

    def test_infer_scene_returns_detections(self, scene):
        cfg = Config(**TOY, mu_cls=0.0, top_k=5)
        model = Detector(cfg)
        dets = model.infer_scene(scene)
        assert len(dets) <= 5
        for d in dets:
            assert 0.0 <= d.final_score <= 1.0
            assert d.box.l > 0
