"""NMS-free decoding, KITTI-protocol AP with 40 recall positions, and
confidence calibration statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .detect_head import RotBinCodec
from .iou_conf import bev_rect, iou_3d, iou_bev
from .types import Box3D, Detection, MapGeometry

NEIGHBOR_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def extract_peaks(heatmap: np.ndarray, top_k: int, mu_cls: float) -> list[tuple[int, int, int, float]]:
    """Local 3x3 maxima per channel (plateaus keep the smallest row-major
    pixel), pooled across classes, truncated to top_k by score, then
    thresholded at mu_cls. Returns (class, u, v, score) tuples."""
    K, L, W = heatmap.shape
    peaks = []
    for k in range(K):
        ch = heatmap[k]
        padded = np.full((L + 2, W + 2), -np.inf, dtype=np.float64)
        padded[1:-1, 1:-1] = ch
        ok = np.ones((L, W), dtype=bool)
        for du, dv in NEIGHBOR_OFFSETS:
            nb = padded[1 + du : 1 + du + L, 1 + dv : 1 + dv + W]
            earlier = du < 0 or (du == 0 and dv < 0)
            ok &= (ch > nb) if earlier else (ch >= nb)
        for u, v in np.argwhere(ok):
            peaks.append((k, int(u), int(v), float(ch[u, v])))
    peaks.sort(key=lambda p: (-p[3], p[0], p[1], p[2]))
    peaks = peaks[:top_k]
    return [p for p in peaks if p[3] >= mu_cls]


def decode(peaks: list[tuple[int, int, int, float]], head_maps: dict[str, np.ndarray],
           geom: MapGeometry, codec: RotBinCodec,
           recalibrated: bool = True) -> list[Detection]:
    """Read box parameters off the head maps at each peak pixel."""
    offset, zmap, size = head_maps["offset"], head_maps["z"], head_maps["size"]
    rot_bin, rot_res = head_maps["rot_bin"], head_maps["rot_res"]
    conf = head_maps.get("iou")
    dets = []
    for k, u, v, score in peaks:
        x = (u + float(offset[0, u, v])) * geom.cell_x + geom.x_min
        y = (v + float(offset[1, u, v])) * geom.cell_y + geom.y_min
        z = float(zmap[0, u, v])
        l, w, h = (float(size[i, u, v]) for i in range(3))
        clamped = False
        if l <= 0 or w <= 0 or h <= 0:
            l, w, h = max(l, 0.01), max(w, 0.01), max(h, 0.01)
            clamped = True
        bin_idx = int(np.argmax(rot_bin[:, u, v]))
        theta = codec.decode(bin_idx, float(rot_res[bin_idx, u, v]))
        iou_conf = float(conf[0, u, v]) if conf is not None else 0.0
        final = iou_conf if (recalibrated and conf is not None) else score
        dets.append(
            Detection(
                box=Box3D(x, y, z, l, w, h, theta, k),
                class_id=k,
                cls_score=score,
                iou_conf=iou_conf,
                final_score=final,
                pixel=(u, v),
                size_clamped=clamped,
            )
        )
    return dets


# backwards-compatible alias used by the confidence-sample selector
decode_at_pixels = decode


@dataclass
class PRCurve:
    recalls: np.ndarray  # the 40 sampled recall positions i/40
    precisions: np.ndarray  # right-max interpolated precision at each
    ap: float
    n_gt: int


def _match_frame(dets: list[Detection], gts: list[Box3D], iou_thresh: float,
                 metric: str) -> list[tuple[float, bool]]:
    """Greedy per-frame matching by descending score; returns (score, is_tp)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].final_score, dets[i].class_id,
                                                    dets[i].pixel))
    taken = [False] * len(gts)
    out = []
    for i in order:
        d = dets[i]
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != d.class_id:
                continue
            iou = iou_3d(d.box, g) if metric == "3d" else iou_bev(bev_rect(d.box), bev_rect(g))
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh:
            taken[best_j] = True
            out.append((d.final_score, True))
        else:
            out.append((d.final_score, False))
    return out


def evaluate_ap(dets_per_frame: list[list[Detection]], gts_per_frame: list[list[Box3D]],
                iou_thresh: float, metric: str = "3d") -> PRCurve:
    """Average precision over 40 recall positions with right-max
    interpolation; matching is greedy per frame within the same class."""
    if metric not in ("3d", "bev"):
        raise ValueError(f"metric must be '3d' or 'bev', got {metric!r}")
    n_gt = sum(len(g) for g in gts_per_frame)
    recalls = (np.arange(40) + 1) / 40.0
    if n_gt == 0:
        warnings.warn("no ground-truth boxes in the split; AP undefined")
        return PRCurve(recalls, np.full(40, np.nan), float("nan"), 0)

    flagged = []
    for frame_idx, (dets, gts) in enumerate(zip(dets_per_frame, gts_per_frame)):
        for rank, (score, is_tp) in enumerate(_match_frame(dets, gts, iou_thresh, metric)):
            flagged.append((score, frame_idx, rank, is_tp))
    flagged.sort(key=lambda t: (-t[0], t[1], t[2]))
    if not flagged:
        return PRCurve(recalls, np.zeros(40), 0.0, n_gt)

    tp = np.cumsum([f[3] for f in flagged])
    fp = np.cumsum([not f[3] for f in flagged])
    rec = tp / n_gt
    prec = tp / (tp + fp)
    # running max of precision from the right
    rmax = np.maximum.accumulate(prec[::-1])[::-1]
    interp = np.zeros(40)
    for i, r in enumerate(recalls):
        idx = np.searchsorted(rec, r, side="left")
        interp[i] = rmax[idx] if idx < len(rec) else 0.0
    return PRCurve(recalls, interp, float(interp.mean()), n_gt)


def _rankdata_average(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    sorted_x = x[order]
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    va, vb = float(a @ a), float(b @ b)
    if va <= 0.0 or vb <= 0.0:
        warnings.warn("zero variance in correlation input; reporting 0")
        return 0.0
    return float(a @ b) / np.sqrt(va * vb)


def calibration_stats(dets_per_frame: list[list[Detection]],
                      gts_per_frame: list[list[Box3D]],
                      use_score: str = "final") -> tuple[float, float]:
    """(PLCC, SRCC) between detection scores and their actual best 3D IoU
    against the frame's ground truth (class-agnostic)."""
    scores, ious = [], []
    for dets, gts in zip(dets_per_frame, gts_per_frame):
        for d in dets:
            s = d.final_score if use_score == "final" else d.cls_score
            scores.append(s)
            best = 0.0
            for g in gts:
                best = max(best, iou_3d(d.box, g))
            ious.append(best)
    if len(scores) < 2:
        raise ValueError(f"need at least 2 detections for correlation, got {len(scores)}")
    s = np.asarray(scores, dtype=np.float64)
    q = np.asarray(ious, dtype=np.float64)
    plcc = _pearson(s, q)
    srcc = _pearson(_rankdata_average(s), _rankdata_average(q))
    return plcc, srcc


def kitti_difficulty(meta: list[float]) -> int:
    """0/1/2 for easy/moderate/hard from (truncation, occlusion, alpha,
    bbox l t r b); -1 when no stratum applies. Only meaningful for real
    KITTI labels; synthetic data is evaluated unstratified."""
    trunc, occ = meta[0], meta[1]
    bbox_h = meta[6] - meta[4]
    if bbox_h >= 40 and occ <= 0 and trunc <= 0.15:
        return 0
    if bbox_h >= 25 and occ <= 1 and trunc <= 0.30:
        return 1
    if bbox_h >= 25 and occ <= 2 and trunc <= 0.50:
        return 2
    return -1
