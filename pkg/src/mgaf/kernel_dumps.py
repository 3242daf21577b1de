"""Binary kernel dumps for cross-implementation parity checking.

For each seed the dump holds randomly generated inputs plus the outputs of
voxelize, iou_bev/iou_3d, build_targets, extract_peaks and decode. All float
payloads are little-endian float32 written after the exact arithmetic the
kernels define, so any faithful reimplementation must reproduce the bytes.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .detect_head import RotBinCodec, build_targets
from .decoder_eval import decode, extract_peaks
from .iou_conf import RotatedRect, iou_3d, iou_bev
from .types import Box3D, MapGeometry, PointCloud, VoxelGridSpec
from .voxel_grid import dump_debug, voxelize

SPEC = VoxelGridSpec(range_min=(0.0, -6.4, -1.0), range_max=(12.8, 6.4, 3.0),
                     d=(0.1, 0.1, 0.25))
GEOM = MapGeometry.from_grid(SPEC, stride=8)  # 16 x 16 BEV cells
CODEC = RotBinCodec(12)
NUM_CLASSES = 2
TOP_K = 12
MU_CLS = 0.25


def _write(path: Path, arr: np.ndarray, dtype: str) -> None:
    np.ascontiguousarray(arr, dtype=dtype).tofile(path)


def _rand_box_array(rng, n, near: np.ndarray | None = None) -> np.ndarray:
    """(n, 7) float32 rows (x y z l w h theta); this dumped array is the
    single source of truth, so both implementations build boxes from the
    identical float32 values."""
    rows = np.empty((n, 7), np.float32)
    for i in range(n):
        if near is None:
            x, y, z = rng.uniform(1.0, 11.8), rng.uniform(-5.4, 5.4), rng.uniform(-0.5, 1.5)
        else:
            x = near[i, 0] + rng.uniform(-2, 2)
            y = near[i, 1] + rng.uniform(-2, 2)
            z = near[i, 2] + rng.uniform(-0.8, 0.8)
        rows[i] = [x, y, z, rng.uniform(0.8, 4.6), rng.uniform(0.5, 2.2),
                   rng.uniform(0.5, 2.0), rng.uniform(0.0, 2.0 * math.pi)]
    return rows


def _boxes_from_array(arr: np.ndarray, classes: np.ndarray | None = None) -> list[Box3D]:
    out = []
    for i, row in enumerate(arr):
        out.append(Box3D(*(float(v) for v in row),
                         class_id=int(classes[i]) if classes is not None else 0))
    return out


def dump_seed(out_dir: Path, seed: int) -> None:
    rng = np.random.default_rng(np.random.SeedSequence([987_001, seed]))
    out_dir.mkdir(parents=True, exist_ok=True)
    L, W = GEOM.shape

    # --- voxelize ---------------------------------------------------------
    n_pts = int(rng.integers(80, 200))
    lo = np.asarray(SPEC.range_min)
    hi = np.asarray(SPEC.range_max)
    pts = np.column_stack([
        rng.uniform(lo[0], hi[0] - 1e-3, n_pts),
        rng.uniform(lo[1], hi[1] - 1e-3, n_pts),
        rng.uniform(lo[2], hi[2] - 1e-3, n_pts),
        rng.uniform(0, 1, n_pts),
    ]).astype(np.float32)
    _write(out_dir / "cloud.f32", pts, "<f4")
    vol = voxelize(PointCloud(pts), SPEC)
    _write(out_dir / "voxel_coords.i32", vol.coords, "<i4")
    _write(out_dir / "voxel_feats.f32", vol.feats, "<f4")
    (out_dir / "voxelize.txt").write_text(dump_debug(vol))

    # --- rotated IoU ------------------------------------------------------
    n_pairs = 12
    arr_a = _rand_box_array(rng, n_pairs)
    arr_b = _rand_box_array(rng, n_pairs, near=arr_a)
    _write(out_dir / "boxes_a.f32", arr_a, "<f4")
    _write(out_dir / "boxes_b.f32", arr_b, "<f4")
    boxes_a = _boxes_from_array(arr_a)
    boxes_b = _boxes_from_array(arr_b)
    bev = [iou_bev(RotatedRect(a.x, a.y, a.l, a.w, a.theta),
                   RotatedRect(b.x, b.y, b.l, b.w, b.theta))
           for a, b in zip(boxes_a, boxes_b)]
    full = [iou_3d(a, b) for a, b in zip(boxes_a, boxes_b)]
    _write(out_dir / "iou_bev.f32", np.array(bev), "<f4")
    _write(out_dir / "iou_3d.f32", np.array(full), "<f4")

    # --- build_targets ----------------------------------------------------
    n_gt = int(rng.integers(1, 6))
    gt_arr = _rand_box_array(rng, n_gt)
    gt_cls = rng.integers(0, NUM_CLASSES, size=n_gt).astype(np.int32)
    _write(out_dir / "gt_boxes.f32", gt_arr, "<f4")
    _write(out_dir / "gt_classes.i32", gt_cls, "<i4")
    gt = _boxes_from_array(gt_arr, gt_cls)
    t = build_targets(gt, NUM_CLASSES, GEOM, CODEC)
    _write(out_dir / "t_heatmap.f32", t.heatmap, "<f4")
    _write(out_dir / "t_offset.f32", t.offset, "<f4")
    _write(out_dir / "t_z.f32", t.zmap, "<f4")
    _write(out_dir / "t_size.f32", t.sizemap, "<f4")
    _write(out_dir / "t_rot_bin.i32", t.rot_bin, "<i4")
    _write(out_dir / "t_rot_res.f32", t.rot_res, "<f4")
    _write(out_dir / "t_center_mask.u8", t.center_mask.astype(np.uint8), "u1")
    _write(out_dir / "t_center_class.i32", t.center_class, "<i4")
    _write(out_dir / "t_mask.f32", t.mask_target, "<f4")
    _write(out_dir / "t_n.i32", np.array([t.n_objects], np.int32), "<i4")

    # --- extract_peaks + decode -------------------------------------------
    heatmap = rng.uniform(0, 1, size=(NUM_CLASSES, L, W)).astype(np.float32)
    if seed % 3 == 0:
        heatmap = ((heatmap * 8).round() / 8).astype(np.float32)  # plateaus
    head_maps = {
        "offset": rng.uniform(0, 1, size=(2, L, W)).astype(np.float32),
        "z": rng.normal(0, 1, size=(1, L, W)).astype(np.float32),
        "size": rng.uniform(0.2, 4.5, size=(3, L, W)).astype(np.float32),
        "rot_bin": rng.normal(0, 1, size=(CODEC.b, L, W)).astype(np.float32),
        "rot_res": rng.uniform(-1, 1, size=(CODEC.b, L, W)).astype(np.float32),
        "iou": rng.uniform(0, 1, size=(1, L, W)).astype(np.float32),
    }
    _write(out_dir / "heatmap.f32", heatmap, "<f4")
    for k, name in (("offset", "m_offset"), ("z", "m_z"), ("size", "m_size"),
                    ("rot_bin", "m_rot_bin"), ("rot_res", "m_rot_res"), ("iou", "m_iou")):
        _write(out_dir / f"{name}.f32", head_maps[k], "<f4")
    peaks = extract_peaks(heatmap, top_k=TOP_K, mu_cls=MU_CLS)
    _write(out_dir / "peaks.i32", np.array([[k, u, v] for k, u, v, _ in peaks], np.int32).reshape(-1, 3), "<i4")
    _write(out_dir / "peak_scores.f32", np.array([s for _, _, _, s in peaks]), "<f4")
    dets = decode(peaks, head_maps, GEOM, CODEC, recalibrated=True)
    det_arr = np.array(
        [[d.box.x, d.box.y, d.box.z, d.box.l, d.box.w, d.box.h, d.box.theta,
          d.cls_score, d.iou_conf, d.final_score] for d in dets], np.float32
    ).reshape(-1, 10)
    _write(out_dir / "dets.f32", det_arr, "<f4")
    _write(out_dir / "dets_class.i32", np.array([d.class_id for d in dets], np.int32), "<i4")
    _write(out_dir / "dets_clamped.u8", np.array([d.size_clamped for d in dets], np.uint8), "u1")

    meta = {
        "n_points": n_pts,
        "n_voxels": int(vol.num_active),
        "n_pairs": n_pairs,
        "n_gt": n_gt,
        "n_peaks": len(peaks),
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1))


def dump_kernels(out_dir: str | Path, n_seeds: int) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "seeds": n_seeds,
        "grid": {
            "range_min": list(SPEC.range_min),
            "range_max": list(SPEC.range_max),
            "voxel_size": list(SPEC.d),
            "resolution": list(SPEC.resolution),
        },
        "map": {
            "shape": list(GEOM.shape),
            "x_min": GEOM.x_min,
            "y_min": GEOM.y_min,
            "cell_x": GEOM.cell_x,
            "cell_y": GEOM.cell_y,
            "stride": GEOM.stride,
        },
        "num_classes": NUM_CLASSES,
        "rot_bins": CODEC.b,
        "top_k": TOP_K,
        "mu_cls": MU_CLS,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    for seed in range(n_seeds):
        dump_seed(out_dir / f"seed_{seed:03d}", seed)
