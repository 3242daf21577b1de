"""Exact rotated IoU, confidence-sample selection and the confidence loss.

The BEV intersection uses Sutherland-Hodgman clipping of one rectangle
against the other; 3D IoU multiplies the BEV intersection area by the
z-interval overlap (boxes are upright). All geometry runs in float64 with
the deterministic trig kernels so results are reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Var, as_var, clip, log, vmean, vsum, mul, add, sub, neg, scale
from .detmath import det_cos, det_sin
from .types import Box3D, Detection

_EPS_LOG = 1e-6


@dataclass(frozen=True)
class RotatedRect:
    cx: float
    cy: float
    l: float
    w: float
    theta: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0):
            raise ValueError("rectangle extents must be positive")

    @property
    def area(self) -> float:
        return self.l * self.w


def bev_rect(box: Box3D) -> RotatedRect:
    return RotatedRect(box.x, box.y, box.l, box.w, box.theta)


def rect_corners(r: RotatedRect) -> list[tuple[float, float]]:
    """Counter-clockwise corner list."""
    c, s = det_cos(r.theta), det_sin(r.theta)
    hl, hw = 0.5 * r.l, 0.5 * r.w
    out = []
    for px, py in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((r.cx + c * px - s * py, r.cy + s * px + c * py))
    return out


def _clip_polygon(subject: list[tuple[float, float]],
                  clip_poly: list[tuple[float, float]]) -> list[tuple[float, float]]:
    output = subject
    n = len(clip_poly)
    for e in range(n):
        ax, ay = clip_poly[e]
        bx, by = clip_poly[(e + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        if not inp:
            break
        m = len(inp)
        for i in range(m):
            px, py = inp[i - 1]
            cx, cy = inp[i]
            dp = ex * (py - ay) - ey * (px - ax)
            dc = ex * (cy - ay) - ey * (cx - ax)
            p_in = dp >= 0.0
            c_in = dc >= 0.0
            if c_in:
                if not p_in:
                    t = dp / (dp - dc)
                    output.append((px + t * (cx - px), py + t * (cy - py)))
                output.append((cx, cy))
            elif p_in:
                t = dp / (dp - dc)
                output.append((px + t * (cx - px), py + t * (cy - py)))
    return output


def _polygon_area(poly: list[tuple[float, float]]) -> float:
    if len(poly) < 3:
        return 0.0
    acc = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    area = 0.5 * acc
    return area if area > 0.0 else 0.0


def intersection_area_bev(a: RotatedRect, b: RotatedRect) -> float:
    # canonical argument order makes iou(a, b) == iou(b, a) bit-exact
    ka = (a.cx, a.cy, a.l, a.w, a.theta)
    kb = (b.cx, b.cy, b.l, b.w, b.theta)
    if kb < ka:
        a, b = b, a
    return _polygon_area(_clip_polygon(rect_corners(a), rect_corners(b)))


def iou_bev(a: RotatedRect, b: RotatedRect) -> float:
    inter = intersection_area_bev(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    iou = inter / union
    return min(1.0, max(0.0, iou))


def iou_3d(a: Box3D, b: Box3D) -> float:
    inter_area = intersection_area_bev(bev_rect(a), bev_rect(b))
    z_lo = max(a.z - 0.5 * a.h, b.z - 0.5 * b.h)
    z_hi = min(a.z + 0.5 * a.h, b.z + 0.5 * b.h)
    dz = z_hi - z_lo
    if dz <= 0.0:
        return 0.0
    inter = inter_area * dz
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def confidence_target(iou: float) -> float:
    """Map an IoU in [0, 1] to the confidence training target."""
    return min(1.0, max(0.0, 2.0 * iou - 0.5))


@dataclass
class ConfidenceSample:
    pred_box: Box3D
    peak_score: float
    iou_target: float
    c_target: float
    pixel: tuple[int, int]


def select_confidence_samples(heatmap: np.ndarray, head_maps: dict[str, np.ndarray],
                              geom, codec, gt_boxes: list[Box3D], m: int) -> list[ConfidenceSample]:
    """Pick the top-m heatmap peaks (pooled across classes) and label each
    decoded box with its best 3D IoU against the ground truth, mapped through
    the confidence target. Returns fewer than m samples when fewer peaks exist.
    """
    from .decoder_eval import decode_at_pixels, extract_peaks

    if m < 1:
        raise ValueError("m must be >= 1")
    peaks = extract_peaks(heatmap, top_k=m, mu_cls=0.0)
    dets = decode_at_pixels(peaks, head_maps, geom, codec)
    out = []
    for det in dets:
        iou_t = 0.0
        for gt in gt_boxes:
            iou_t = max(iou_t, iou_3d(det.box, gt))
        out.append(
            ConfidenceSample(
                pred_box=det.box,
                peak_score=det.cls_score,
                iou_target=iou_t,
                c_target=confidence_target(iou_t),
                pixel=det.pixel,
            )
        )
    return out


def iou_conf_loss(c_hat: Var, c_targets: np.ndarray) -> Var:
    """Binary cross-entropy between predicted confidences (already in (0,1))
    and their targets; zero-sample case contributes nothing."""
    n = int(np.asarray(c_targets).size)
    if n == 0:
        return as_var(np.zeros((), dtype=c_hat.dtype if isinstance(c_hat, Var) else np.float64))
    c = np.asarray(c_targets, dtype=c_hat.value.dtype)
    p = clip(c_hat, _EPS_LOG, 1.0 - _EPS_LOG)
    pos = mul(as_var(c), log(p))
    negt = mul(as_var(1.0 - c), log(sub(as_var(np.ones_like(c)), p)))
    return scale(vsum(add(pos, negt)), -1.0 / n)


def recalibrate(detections: list[Detection], conf_map: np.ndarray,
                enabled: bool = True) -> list[Detection]:
    """Assign each detection's final score from the confidence map at its
    peak pixel (or keep the raw classification score when disabled)."""
    out = []
    for d in detections:
        u, v = d.pixel
        conf = float(conf_map[0, u, v])
        final = conf if enabled else d.cls_score
        out.append(
            Detection(
                box=d.box,
                class_id=d.class_id,
                cls_score=d.cls_score,
                iou_conf=conf,
                final_score=final,
                pixel=d.pixel,
                size_clamped=d.size_clamped,
            )
        )
    return out
