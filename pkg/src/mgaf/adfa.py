"""BEV feature adaptation: height flattening, a three-level deformable
convolution tower, and supervised mask-guided attention.

The flatten keeps every voxel feature (height moves into channels), the
tower mixes receptive fields at strides 1/2/4 with modulated deformable
convs, and the attention head gates the result as G = (1 + S) * F.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .detmath import det_cos, det_sin
from .nn import (
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    ParamStore,
    base_tap_positions,
    bilinear_tap_sample,
    conv2d,
)
from .types import Box3D, DenseBEVMap, MapGeometry, ShapeError, SparseVolume

_EPS_LOG = 1e-6
_FOCAL_PRIOR_BIAS = -math.log((1.0 - 0.01) / 0.01)


# ---------------------------------------------------------------------------
# 3D -> 2D transform


def flatten_height_op(coords: np.ndarray, feats: Var, spatial_shape) -> Var:
    """Scatter sparse voxel features into a dense (C1*H, L, W) map; channel
    block h*C1 .. (h+1)*C1 holds height bin h. Lossless on active entries."""
    L, W, H = spatial_shape
    c1 = feats.value.shape[1]
    rows = coords[:, 2].astype(np.int64)[:, None] * c1 + np.arange(c1)[None, :]
    cols = (coords[:, 0].astype(np.int64) * W + coords[:, 1])[:, None]
    cols = np.broadcast_to(cols, rows.shape)

    out = np.zeros((H * c1, L * W), dtype=feats.value.dtype)
    out[rows, cols] = feats.value

    def bwd(g):
        return (g.reshape(H * c1, L * W)[rows, cols],)

    return Var(out.reshape(H * c1, L, W), (feats,), bwd, op="flatten_height")


def flatten_height(vol: SparseVolume, geom: MapGeometry | None = None) -> DenseBEVMap:
    L, W, H = vol.spatial_shape
    data = flatten_height_op(vol.coords, Var(vol.feats), vol.spatial_shape).value
    if geom is None:
        geom = MapGeometry(shape=(L, W), x_min=0.0, y_min=0.0, cell_x=1.0, cell_y=1.0, stride=1)
    return DenseBEVMap(data, geom)


def unflatten_height(bev: DenseBEVMap | np.ndarray, c1: int, coords: np.ndarray) -> np.ndarray:
    """Gather back the per-voxel features for the given active coords."""
    data = bev.data if isinstance(bev, DenseBEVMap) else bev
    ch, L, W = data.shape
    H = ch // c1
    rows = coords[:, 2].astype(np.int64)[:, None] * c1 + np.arange(c1)[None, :]
    cols = (coords[:, 0].astype(np.int64) * W + coords[:, 1])[:, None]
    return data.reshape(ch, L * W)[rows, np.broadcast_to(cols, rows.shape)]


# ---------------------------------------------------------------------------
# modulated deformable convolution


class DeformConv2d:
    """3x3 modulated deformable conv. The offset branch (18 channels: 9 row
    offsets then 9 col offsets) and the modulation branch (9 channels,
    logistic-squashed) are zero-initialized, so the layer starts as an
    ordinary conv scaled by 0.5.

    Raw offsets pass through a tanh soft bound scaled to the map size: once a
    sample leaves the zero-padded map its gradient vanishes and the tap can
    never recover, so unbounded offsets drift dead on small maps. The offset
    branch also learns at 0.1x the base rate, the usual setting for this
    operator.
    """

    def __init__(self, store: ParamStore, prefix: str, cin: int, cout: int, norm: bool = True,
                 max_offset: float = 4.0):
        self.max_offset = max_offset
        self.w = store.conv_weight(f"{prefix}.weight", (cout, cin, 3, 3), fan_in=cin * 9)
        self.b = store.bias(f"{prefix}.bias", cout)
        self.w_off = store.conv_weight(f"{prefix}.offset.weight", (18, cin, 3, 3),
                                       fan_in=cin * 9, zero=True)
        self.w_off.lr_mult = 0.1
        self.b_off = store.bias(f"{prefix}.offset.bias", 18)
        self.b_off.lr_mult = 0.1
        self.w_mod = store.conv_weight(f"{prefix}.mod.weight", (9, cin, 3, 3),
                                       fan_in=cin * 9, zero=True)
        self.b_mod = store.bias(f"{prefix}.mod.bias", 9)
        self.bn = BatchNorm(store, f"{prefix}.bn", cout) if norm else None

    def raw_forward(self, x: Var) -> Var:
        """Deformable conv without norm/activation."""
        cin, L, W = x.value.shape
        if cin != self.w.value.shape[1]:
            raise ShapeError(f"deform conv expects {self.w.value.shape[1]} channels, got {cin}")
        bound = min(self.max_offset, max(1.5, 0.5 * max(L, W)))
        off_raw = conv2d(x, self.w_off, self.b_off, stride=1, pad=1)
        off = ad.scale(ad.tanh(ad.scale(off_raw, 1.0 / bound)), bound)
        mod = ad.sigmoid(conv2d(x, self.w_mod, self.b_mod, stride=1, pad=1))
        base0, base1 = base_tap_positions(L, W)
        pos0 = ad.add(ad.getitem(off, np.arange(9)), ad.as_var(base0.astype(x.value.dtype)))
        pos1 = ad.add(ad.getitem(off, np.arange(9, 18)), ad.as_var(base1.astype(x.value.dtype)))
        samples = bilinear_tap_sample(x, pos0, pos1)  # (9, C, L, W)
        modded = ad.mul(samples, ad.reshape(mod, (9, 1, L, W)))
        cout = self.w.value.shape[0]
        wmat = ad.reshape(ad.transpose(self.w, (0, 2, 3, 1)), (cout, 9 * cin))
        out = ad.matmul(wmat, ad.reshape(modded, (9 * cin, L * W)))
        out = ad.add(ad.reshape(out, (cout, L, W)), ad.reshape(self.b, (cout, 1, 1)))
        return out

    def __call__(self, x: Var, train: bool) -> Var:
        out = self.raw_forward(x)
        if self.bn is not None:
            out = self.bn.apply_map(out, train)
        return ad.relu(out)


def deform_conv_forward(layer: DeformConv2d, x: DenseBEVMap, train: bool = False) -> DenseBEVMap:
    out = layer(Var(x.data), train)
    return DenseBEVMap(out.value, x.geom)


# ---------------------------------------------------------------------------
# deformable convolutional tower


class DeformTower:
    """Three cascaded levels (strides 1, 2, 2), each ending in a deformable
    conv; level outputs are upsampled by transpose convs (strides 1, 2, 4),
    concatenated, reduced to c2 and passed through a final deformable conv."""

    def __init__(self, store: ParamStore, cin: int, tower_ch: int = 128, c2: int = 256,
                 n_lvl: int = 2):
        self.levels = []
        prev = cin
        for i, stride in enumerate((1, 2, 2)):
            convs = [Conv2d(store, f"tower.lvl{i}.down", prev, tower_ch, stride=stride)]
            for j in range(n_lvl):
                convs.append(Conv2d(store, f"tower.lvl{i}.conv{j}", tower_ch, tower_ch))
            deform = DeformConv2d(store, f"tower.lvl{i}.deform", tower_ch, tower_ch)
            self.levels.append((stride, convs, deform))
            prev = tower_ch
        self.ups = [
            ConvTranspose2d(store, "tower.up0", tower_ch, tower_ch, k=3, stride=1, pad=1),
            ConvTranspose2d(store, "tower.up1", tower_ch, tower_ch, k=4, stride=2, pad=1),
            ConvTranspose2d(store, "tower.up2", tower_ch, tower_ch, k=8, stride=4, pad=2),
        ]
        self.reduce = Conv2d(store, "tower.reduce", 3 * tower_ch, c2)
        self.final = DeformConv2d(store, "tower.final", c2, c2)
        self.c2 = c2

    def __call__(self, x: Var, train: bool) -> Var:
        _, L, W = x.value.shape
        taps = []
        cur = x
        for stride, convs, deform in self.levels:
            for conv in convs:
                cur = conv(cur, train)
            taps.append(deform(cur, train))
            cur = taps[-1]
        upped = [up(t, (L, W), train) for up, t in zip(self.ups, taps)]
        fused = ad.concat(upped, axis=0)
        reduced = self.reduce(fused, train)
        return self.final(reduced, train)


def deform_tower_forward(tower: DeformTower, f0: DenseBEVMap, train: bool = False) -> DenseBEVMap:
    out = tower(Var(f0.data), train)
    return DenseBEVMap(out.value, f0.geom)


# ---------------------------------------------------------------------------
# mask-guided attention


class AttentionHead:
    """phi_s: 3x3 conv (norm + ReLU) then 1x1 conv to a single logit map."""

    def __init__(self, store: ParamStore, cin: int, mid: int = 128):
        self.conv = Conv2d(store, "attn.conv", cin, mid)
        self.out = Conv2d(store, "attn.out", mid, 1, k=1, norm=False, act=False,
                          bias_fill=_FOCAL_PRIOR_BIAS)

    def logits(self, f: Var, train: bool) -> Var:
        return self.out(self.conv(f, train), train)


def mask_attention(f: Var, head: AttentionHead, train: bool = False) -> tuple[Var, Var, Var]:
    """Returns (G, S, S_logits) with S = sigmoid(phi_s(F)) and G = (1+S)*F."""
    logits = head.logits(f, train)
    s = ad.sigmoid(logits)
    g = ad.mul(f, ad.add(ad.as_var(np.ones((), dtype=f.value.dtype)), s))
    return g, s, logits


def mask_target(gt_boxes: list[Box3D], geom: MapGeometry) -> np.ndarray:
    """Class-agnostic BEV segmentation target: 1 where the cell center lies
    in some ground-truth footprint. Half-open in the box frame so a box edge
    on a cell center claims exactly one side."""
    L, W = geom.shape
    out = np.zeros((1, L, W), dtype=np.float32)
    if not gt_boxes:
        return out
    xs = geom.x_min + (np.arange(L, dtype=np.float64) + 0.5) * geom.cell_x
    ys = geom.y_min + (np.arange(W, dtype=np.float64) + 0.5) * geom.cell_y
    for box in gt_boxes:
        c, s = det_cos(box.theta), det_sin(box.theta)
        dx = xs[:, None] - box.x
        dy = ys[None, :] - box.y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        inside = (u >= -0.5 * box.l) & (u < 0.5 * box.l) & (v >= -0.5 * box.w) & (v < 0.5 * box.w)
        out[0] = np.maximum(out[0], inside.astype(np.float32))
    return out


def mask_loss(s_logits: Var, target: np.ndarray) -> Var:
    """Binary focal loss, alpha=0.25 gamma=2, averaged over all cells."""
    if s_logits.value.shape != target.shape:
        raise ShapeError(f"mask logits {s_logits.value.shape} vs target {target.shape}")
    y = ad.as_var(target.astype(s_logits.value.dtype))
    p = ad.clip(ad.sigmoid(s_logits), _EPS_LOG, 1.0 - _EPS_LOG)
    one = ad.as_var(np.ones((), dtype=s_logits.value.dtype))
    pos = ad.scale(ad.mul(ad.square(ad.sub(one, p)), ad.log(p)), -0.25)
    neg = ad.scale(ad.mul(ad.square(p), ad.log(ad.sub(one, p))), -0.75)
    per_cell = ad.add(ad.mul(y, pos), ad.mul(ad.sub(one, y), neg))
    return ad.vmean(per_cell)
