"""Full detector: backbone -> flatten -> deformable tower -> attention ->
heads, plus the per-scene loss assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adfa import AttentionHead, DeformTower, flatten_height_op, mask_attention, mask_loss
from .autodiff import Var
from .config import Config
from .data_ingest import crop_to_range
from .decoder_eval import decode, extract_peaks
from .detect_head import (
    HeadStack,
    RotBinCodec,
    box_loss,
    center_l1_loss,
    cls_focal_loss,
    corner_loss,
    corners_of,
    decode_center_corners,
    rot_loss,
)
from .iou_conf import ConfidenceSample, iou_conf_loss, select_confidence_samples
from .nn import ParamStore
from .sparse_backbone import ResVoxelNet
from .types import Box3D, Detection, MapGeometry, Scene, SparseVolume, TargetBundle
from .voxel_grid import voxelize

STRIDE = 8


@dataclass
class SceneOutputs:
    """Graph nodes of one forward pass."""

    f0: Var  # flattened BEV input of the tower
    f: Var  # tower output
    g: Var  # attention-gated features
    s_logits: Var
    heads: dict[str, Var]

    def head_maps_np(self) -> dict[str, np.ndarray]:
        """Detached maps for decoding; heatmap and iou are sigmoided."""
        from .autodiff import stable_sigmoid as sig

        return {
            "heatmap": sig(self.heads["heatmap"].value),
            "offset": self.heads["offset"].value,
            "z": self.heads["z"].value,
            "size": self.heads["size"].value,
            "rot_bin": self.heads["rot_bin"].value,
            "rot_res": self.heads["rot_res"].value,
            "iou": sig(self.heads["iou"].value),
        }


class Detector:
    def __init__(self, cfg: Config, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.spec = cfg.grid_spec()
        self.geom = MapGeometry.from_grid(self.spec, STRIDE)
        self.codec = RotBinCodec(cfg.rot_bins)
        self.store = ParamStore(np.random.default_rng(cfg.seed), dtype=dtype)
        self.backbone = ResVoxelNet(self.store, in_ch=4,
                                    channels=cfg.backbone_channels, n_res=cfg.n_res)
        h_out = -(-self.spec.resolution[2] // STRIDE)
        self.tower = DeformTower(self.store, cin=cfg.backbone_channels[-1] * h_out,
                                 tower_ch=cfg.tower_channels, c2=cfg.c2, n_lvl=cfg.n_lvl)
        self.attn = AttentionHead(self.store, cin=cfg.c2, mid=cfg.head_channels)
        self.heads = HeadStack(self.store, cin=cfg.c2, num_classes=cfg.num_classes,
                               rot_bins=cfg.rot_bins, mid=cfg.head_channels,
                               size_prior=tuple(cfg.size_prior))

    # ------------------------------------------------------------------
    def forward(self, vol: SparseVolume, train: bool) -> SceneOutputs:
        coords, feats, shape = self.backbone.forward(
            vol.coords, Var(vol.feats), vol.spatial_shape, train
        )
        f0 = flatten_height_op(coords, feats, shape)
        f = self.tower(f0, train)
        g, _, s_logits = mask_attention(f, self.attn, train)
        outs = self.heads(g, train)
        if self.cfg.detach_iou:
            # recompute the iou stack on a detached copy of G
            conv, head = self.heads.tasks["iou"]
            outs["iou"] = head(conv(g.detach(), train), train)
        return SceneOutputs(f0=f0, f=f, g=g, s_logits=s_logits, heads=outs)

    def prepare_scene(self, scene: Scene) -> SparseVolume:
        cropped = crop_to_range(scene, self.spec)
        return voxelize(cropped.cloud, self.spec)

    # ------------------------------------------------------------------
    def select_samples(self, outs: SceneOutputs, gt_boxes: list[Box3D]) -> list[ConfidenceSample]:
        maps = outs.head_maps_np()
        return select_confidence_samples(
            maps["heatmap"], maps, self.geom, self.codec, gt_boxes, self.cfg.iou_samples_m
        )

    def compute_losses(self, outs: SceneOutputs, targets: TargetBundle,
                       samples: list[ConfidenceSample]) -> dict[str, Var]:
        cfg = self.cfg
        n = targets.n_objects
        p_hat = ad.sigmoid(outs.heads["heatmap"])
        l_cls = cls_focal_loss(p_hat, targets.heatmap, n)

        l_off = center_l1_loss(outs.heads["offset"], targets.offset, targets.center_mask, n)
        l_z = center_l1_loss(outs.heads["z"], targets.zmap, targets.center_mask, n)
        l_size = center_l1_loss(outs.heads["size"], targets.sizemap, targets.center_mask, n)
        l_rot = rot_loss(outs.heads["rot_bin"], outs.heads["rot_res"], targets.rot_bin,
                         targets.rot_res, targets.center_mask, n)
        if n > 0:
            corners = decode_center_corners(outs.heads, targets, self.geom, self.codec)
            l_corner = corner_loss(corners, targets.center_boxes, n)
        else:
            l_corner = ad.as_var(np.zeros((), dtype=outs.g.value.dtype))
        l_box = box_loss(l_off, l_z, l_size, l_rot, l_corner, cfg.gammas())

        if samples:
            flat = np.array([p.pixel[0] * self.geom.shape[1] + p.pixel[1] for p in samples])
            conf_flat = ad.reshape(ad.sigmoid(outs.heads["iou"]), (-1,))
            c_hat = ad.getitem(conf_flat, flat)
            c_targets = np.array([p.c_target for p in samples])
        else:
            c_hat = ad.as_var(np.zeros(0, dtype=outs.g.value.dtype))
            c_targets = np.zeros(0)
        l_iou = iou_conf_loss(c_hat, c_targets)

        l_sem = mask_loss(outs.s_logits, targets.mask_target.astype(outs.s_logits.value.dtype))

        from .train_harness import total_loss

        l_total = total_loss(l_cls, l_box, l_iou, l_sem)
        return {
            "cls": l_cls, "box": l_box, "iou": l_iou, "sem": l_sem, "total": l_total,
            "offset": l_off, "z": l_z, "size": l_size, "rot": l_rot, "corner": l_corner,
        }

    # ------------------------------------------------------------------
    def infer_scene(self, scene: Scene, recalibrate: bool = True) -> list[Detection]:
        vol = self.prepare_scene(scene)
        outs = self.forward(vol, train=False)
        maps = outs.head_maps_np()
        peaks = extract_peaks(maps["heatmap"], top_k=self.cfg.top_k, mu_cls=self.cfg.mu_cls)
        return decode(peaks, maps, self.geom, self.codec, recalibrated=recalibrate)
