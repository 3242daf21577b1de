"""Parallel detection heads, supervision-target construction and box losses.

Targets follow the center-point recipe: a Gaussian splat per object whose
standard deviation is one third of the minimum-overlap-0.7 corner radius of
the box footprint in output pixels, floating-point center offsets, raw
metric z/size regression, and bin+residual rotation encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .adfa import mask_target
from .detmath import det_exp
from .nn import Conv2d, ParamStore
from .types import Box3D, MapGeometry, ShapeError, TargetBundle, TWO_PI

_EPS_LOG = 1e-6
_FOCAL_PRIOR_BIAS = -math.log((1.0 - 0.01) / 0.01)


@dataclass(frozen=True)
class RotBinCodec:
    """Angle codec over [0, 2pi): bin index plus a residual in [-1, 1)
    normalized by the half bin width."""

    b: int = 12

    def __post_init__(self):
        if self.b < 2:
            raise ValueError("need at least 2 rotation bins")

    @property
    def bin_width(self) -> float:
        return TWO_PI / self.b

    def encode(self, theta: float) -> tuple[int, float]:
        d = self.bin_width
        bin_idx = int(math.floor(theta / d))
        if bin_idx >= self.b:
            bin_idx = self.b - 1
        res = (theta - (bin_idx + 0.5) * d) / (0.5 * d)
        return bin_idx, res

    def decode(self, bin_idx: int, res: float) -> float:
        d = self.bin_width
        t = (bin_idx + 0.5 + 0.5 * res) * d
        t -= TWO_PI * math.floor(t / TWO_PI)
        return t if t < TWO_PI else 0.0


def gaussian_radius(footprint_l: float, footprint_w: float, min_overlap: float = 0.7) -> float:
    """Corner-keypoint radius such that a box shifted by r still overlaps the
    original at min_overlap IoU (the standard three-case quadratic form)."""
    h, w = footprint_l, footprint_w
    a1 = 1.0
    b1 = h + w
    c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap)
    sq1 = math.sqrt(b1 * b1 - 4.0 * a1 * c1)
    r1 = (b1 + sq1) / 2.0

    a2 = 4.0
    b2 = 2.0 * (h + w)
    c2 = (1.0 - min_overlap) * w * h
    sq2 = math.sqrt(b2 * b2 - 4.0 * a2 * c2)
    r2 = (b2 + sq2) / 2.0

    a3 = 4.0 * min_overlap
    b3 = -2.0 * min_overlap * (h + w)
    c3 = (min_overlap - 1.0) * w * h
    sq3 = math.sqrt(b3 * b3 - 4.0 * a3 * c3)
    r3 = (b3 + sq3) / 2.0
    return min(r1, r2, r3)


def build_targets(gt_boxes: list[Box3D], num_classes: int, geom: MapGeometry,
                  codec: RotBinCodec) -> TargetBundle:
    L, W = geom.shape
    heatmap = np.zeros((num_classes, L, W), dtype=np.float32)
    offset = np.zeros((2, L, W), dtype=np.float32)
    zmap = np.zeros((1, L, W), dtype=np.float32)
    sizemap = np.zeros((3, L, W), dtype=np.float32)
    rot_bin = np.zeros((L, W), dtype=np.int32)
    rot_res = np.zeros((L, W), dtype=np.float32)
    center_mask = np.zeros((L, W), dtype=bool)
    center_class = np.zeros((L, W), dtype=np.int32)
    best_area = np.zeros((L, W), dtype=np.float64)
    owner: dict[int, Box3D] = {}

    for box in gt_boxes:
        if not (0 <= box.class_id < num_classes):
            raise ValueError(f"class_id {box.class_id} outside [0, {num_classes})")
        px = (box.x - geom.x_min) / geom.cell_x
        py = (box.y - geom.y_min) / geom.cell_y
        u, v = int(math.floor(px)), int(math.floor(py))
        if not (0 <= u < L and 0 <= v < W):
            continue

        r = max(1.0, gaussian_radius(box.l / geom.cell_x, box.w / geom.cell_y))
        sigma = r / 3.0
        wr = int(math.ceil(r - 1e-9))
        inv = 1.0 / (2.0 * sigma * sigma)
        for du in range(-wr, wr + 1):
            uu = u + du
            if not (0 <= uu < L):
                continue
            for dv in range(-wr, wr + 1):
                vv = v + dv
                if not (0 <= vv < W):
                    continue
                g = det_exp(-(du * du + dv * dv) * inv)
                if g > heatmap[box.class_id, uu, vv]:
                    heatmap[box.class_id, uu, vv] = np.float32(g)

        area = box.l * box.w
        if center_mask[u, v] and best_area[u, v] >= area:
            continue  # pixel collision: the larger footprint keeps the regression targets
        center_mask[u, v] = True
        center_class[u, v] = box.class_id
        best_area[u, v] = area
        owner[u * W + v] = box
        offset[0, u, v] = np.float32(px - u)
        offset[1, u, v] = np.float32(py - v)
        zmap[0, u, v] = np.float32(box.z)
        sizemap[0, u, v] = np.float32(box.l)
        sizemap[1, u, v] = np.float32(box.w)
        sizemap[2, u, v] = np.float32(box.h)
        bin_idx, res = codec.encode(box.theta)
        rot_bin[u, v] = bin_idx
        rot_res[u, v] = np.float32(res)

    return TargetBundle(
        heatmap=heatmap,
        offset=offset,
        zmap=zmap,
        sizemap=sizemap,
        rot_bin=rot_bin,
        rot_res=rot_res,
        center_mask=center_mask,
        center_class=center_class,
        n_objects=int(center_mask.sum()),
        mask_target=mask_target(gt_boxes, geom),
        center_boxes=[owner[k] for k in sorted(owner)],
    )


# ---------------------------------------------------------------------------
# heads


class HeadStack:
    """Seven parallel 3x3(128)+1x1 stacks over the gated BEV features.

    The heatmap bias starts at the focal prior and the size bias at a metric
    prior; raw-meter regression from a zero start otherwise spends most of
    the schedule just moving the bias."""

    def __init__(self, store: ParamStore, cin: int, num_classes: int, rot_bins: int,
                 mid: int = 128, size_prior: tuple[float, float, float] = (3.0, 1.6, 1.5)):
        def stack(name, width, bias_fill=0.0):
            return (
                Conv2d(store, f"head.{name}.conv", cin, mid),
                Conv2d(store, f"head.{name}.out", mid, width, k=1, norm=False, act=False,
                       bias_fill=bias_fill),
            )

        self.tasks = {
            "heatmap": stack("heatmap", num_classes, bias_fill=_FOCAL_PRIOR_BIAS),
            "offset": stack("offset", 2, bias_fill=0.5),
            "z": stack("z", 1),
            "size": stack("size", 3, bias_fill=np.asarray(size_prior)),
            "rot_bin": stack("rot_bin", rot_bins),
            "rot_res": stack("rot_res", rot_bins),
            "iou": stack("iou", 1),
        }

    def __call__(self, g: Var, train: bool) -> dict[str, Var]:
        out = {}
        for name, (conv, head) in self.tasks.items():
            out[name] = head(conv(g, train), train)
        return out


# ---------------------------------------------------------------------------
# losses


def cls_focal_loss(p_hat: Var, p_target: np.ndarray, n_objects: int) -> Var:
    """Center-point focal loss (alpha=2, beta=4), summed then divided by the
    object count. p_hat must already be in (0, 1)."""
    if p_hat.value.shape != p_target.shape:
        raise ShapeError(f"heatmap {p_hat.value.shape} vs target {p_target.shape}")
    t = p_target.astype(p_hat.value.dtype)
    pos_mask = (t >= 1.0).astype(p_hat.value.dtype)
    p = ad.clip(p_hat, _EPS_LOG, 1.0 - _EPS_LOG)
    one = ad.as_var(np.ones((), dtype=p_hat.value.dtype))
    pos = ad.mul(ad.mul(ad.as_var(pos_mask), ad.square(ad.sub(one, p))), ad.log(p))
    neg_w = ((1.0 - t) ** 4 * (1.0 - pos_mask)).astype(p_hat.value.dtype)
    neg = ad.mul(ad.mul(ad.as_var(neg_w), ad.square(p)), ad.log(ad.sub(one, p)))
    total = ad.vsum(ad.add(pos, neg))
    return ad.scale(total, -1.0 / max(n_objects, 1))


def _gather_centers(x: Var, center_mask: np.ndarray) -> Var:
    """(C, L, W) -> (n_centers, C) rows at mask pixels (row-major order)."""
    c = x.value.shape[0]
    L, W = x.value.shape[1:]
    flat_idx = np.flatnonzero(center_mask.reshape(-1))
    xt = ad.transpose(ad.reshape(x, (c, L * W)), (1, 0))
    return ad.getitem(xt, flat_idx)


def center_l1_loss(pred: Var, target: np.ndarray, center_mask: np.ndarray,
                   n_objects: int) -> Var:
    """Sum of |pred - target| over channels at center pixels, divided by N."""
    if pred.value.shape != target.shape:
        raise ShapeError(f"prediction {pred.value.shape} vs target {target.shape}")
    if n_objects == 0:
        return ad.as_var(np.zeros((), dtype=pred.value.dtype))
    rows = _gather_centers(pred, center_mask)
    tr = target.reshape(target.shape[0], -1).T[np.flatnonzero(center_mask.reshape(-1))]
    diff = ad.absolute(ad.sub(rows, ad.as_var(tr.astype(pred.value.dtype))))
    return ad.scale(ad.vsum(diff), 1.0 / n_objects)


def rot_loss(bin_logits: Var, res_pred: Var, rot_bin: np.ndarray, rot_res: np.ndarray,
             center_mask: np.ndarray, n_objects: int) -> Var:
    """Cross-entropy over rotation bins plus L1 on the residual channel of
    the true bin, averaged over objects."""
    if n_objects == 0:
        return ad.as_var(np.zeros((), dtype=bin_logits.value.dtype))
    flat = np.flatnonzero(center_mask.reshape(-1))
    bins = rot_bin.reshape(-1)[flat]
    res_t = rot_res.reshape(-1)[flat]

    logits = _gather_centers(bin_logits, center_mask)  # (n, b)
    m = logits.value.max(axis=1, keepdims=True)
    shifted = ad.sub(logits, ad.as_var(m))
    lse = ad.add(ad.log(ad.vsum(ad.exp(shifted), axis=1, keepdims=True)), ad.as_var(m))
    picked = ad.getitem(logits, (np.arange(len(bins)), bins))
    ce = ad.sub(ad.reshape(lse, (-1,)), picked)

    res_rows = _gather_centers(res_pred, center_mask)
    res_sel = ad.getitem(res_rows, (np.arange(len(bins)), bins))
    l1 = ad.absolute(ad.sub(res_sel, ad.as_var(res_t.astype(res_sel.value.dtype))))
    return ad.scale(ad.vsum(ad.add(ce, l1)), 1.0 / n_objects)


_CORNER_SIGNS = np.array(
    [[1 - 2 * (k & 1), 1 - 2 * ((k >> 1) & 1), 1 - 2 * ((k >> 2) & 1)] for k in range(8)],
    dtype=np.float64,
)


def corners_of(box: Box3D) -> np.ndarray:
    """(8, 3) corners; index bit0/bit1/bit2 flip the l/w/h half-extents
    (bit clear = +), rotated by theta about Z and shifted to the center."""
    hx = _CORNER_SIGNS[:, 0] * 0.5 * box.l
    hy = _CORNER_SIGNS[:, 1] * 0.5 * box.w
    hz = _CORNER_SIGNS[:, 2] * 0.5 * box.h
    c, s = math.cos(box.theta), math.sin(box.theta)
    return np.stack(
        [box.x + c * hx - s * hy, box.y + s * hx + c * hy, box.z + hz], axis=1
    )


def decode_center_corners(head_outs: dict[str, Var], targets: TargetBundle,
                          geom: MapGeometry, codec: RotBinCodec) -> Var:
    """Differentiable (n, 8, 3) corner tensor for the boxes decoded at the
    ground-truth center pixels. Rotation uses the true bin with the predicted
    residual so the corner gradient reaches the right residual channel."""
    mask = targets.center_mask
    n = int(mask.sum())
    flat = np.flatnonzero(mask.reshape(-1))
    us, vs = np.divmod(flat, geom.shape[1])
    bins = targets.rot_bin.reshape(-1)[flat]

    off = _gather_centers(head_outs["offset"], mask)  # (n, 2)
    z = _gather_centers(head_outs["z"], mask)  # (n, 1)
    size = _gather_centers(head_outs["size"], mask)  # (n, 3)
    res_rows = _gather_centers(head_outs["rot_res"], mask)
    res = ad.getitem(res_rows, (np.arange(n), bins))  # (n,)

    dt = off.value.dtype
    ux = ad.as_var((geom.x_min + us * geom.cell_x).astype(dt))
    vy = ad.as_var((geom.y_min + vs * geom.cell_y).astype(dt))
    x = ad.add(ux, ad.scale(ad.getitem(off, (slice(None), 0)), geom.cell_x))
    y = ad.add(vy, ad.scale(ad.getitem(off, (slice(None), 1)), geom.cell_y))
    d = codec.bin_width
    theta = ad.scale(ad.add(ad.as_var((bins + 0.5).astype(dt)), ad.scale(res, 0.5)), d)
    c, s = ad.cos(theta), ad.sin(theta)

    signs = _CORNER_SIGNS.astype(dt)
    hl = ad.scale(ad.getitem(size, (slice(None), 0)), 0.5)
    hw = ad.scale(ad.getitem(size, (slice(None), 1)), 0.5)
    hh = ad.scale(ad.getitem(size, (slice(None), 2)), 0.5)

    def outer(a: Var, sign_col: np.ndarray) -> Var:
        return ad.mul(ad.reshape(a, (-1, 1)), ad.as_var(sign_col[None, :]))

    ox = outer(hl, signs[:, 0])  # (n, 8)
    oy = outer(hw, signs[:, 1])
    oz = outer(hh, signs[:, 2])
    cc, ss = ad.reshape(c, (-1, 1)), ad.reshape(s, (-1, 1))
    cx = ad.add(ad.reshape(x, (-1, 1)), ad.sub(ad.mul(cc, ox), ad.mul(ss, oy)))
    cy = ad.add(ad.reshape(y, (-1, 1)), ad.add(ad.mul(ss, ox), ad.mul(cc, oy)))
    cz = ad.add(ad.reshape(z, (-1, 1)), oz)
    stacked = ad.concat(
        [ad.reshape(cx, (n, 8, 1)), ad.reshape(cy, (n, 8, 1)), ad.reshape(cz, (n, 8, 1))],
        axis=2,
    )
    return stacked


def corner_loss(pred_corners: Var, gt_boxes_at_centers: list[Box3D], n_objects: int) -> Var:
    """Mean over objects of the summed corner-to-corner distances."""
    if n_objects == 0:
        return ad.as_var(np.zeros((), dtype=pred_corners.value.dtype))
    gt = np.stack([corners_of(b) for b in gt_boxes_at_centers]).astype(pred_corners.value.dtype)
    diff = ad.sub(pred_corners, ad.as_var(gt))
    dist = ad.sqrt(ad.vsum(ad.square(diff), axis=2))
    return ad.scale(ad.vsum(dist), 1.0 / n_objects)


def box_loss(l_offset: Var, l_z: Var, l_size: Var, l_rot: Var, l_corner: Var,
             gammas: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)) -> Var:
    parts = (l_offset, l_z, l_size, l_rot, l_corner)
    total = None
    for g, part in zip(gammas, parts):
        term = ad.scale(part, g)
        total = term if total is None else ad.add(total, term)
    return total
