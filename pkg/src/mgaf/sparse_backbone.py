"""Hierarchical sparse 3D convolutional backbone.

The rulebook lists, per kernel tap, the (input_index, output_index) pairs
that a gather-multiply-scatter pass needs. Submanifold layers keep the
active set; strided layers emit every output site reached by at least one
tap. Tap t = a*9 + b*3 + c covers offset (a-1, b-1, c-1), so
out(p) = sum_t W_t . in(p*stride + offset_t), i.e. standard zero-padded
cross-correlation restricted to active sites.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Var, add, relu, transpose
from .nn import BatchNorm, ParamStore
from .types import ShapeError, SparseVolume

_TAP_OFFSETS = np.array(
    [(a - 1, b - 1, c - 1) for a in range(3) for b in range(3) for c in range(3)],
    dtype=np.int64,
)


@dataclass
class Rulebook:
    taps_in: list[np.ndarray]
    taps_out: list[np.ndarray]
    out_coords: np.ndarray
    out_shape: tuple[int, int, int]
    kind: str
    stride: int

    @property
    def num_pairs(self) -> int:
        return sum(len(t) for t in self.taps_in)


def _keys(coords: np.ndarray, shape) -> np.ndarray:
    _, W, H = shape
    c = coords.astype(np.int64)
    return (c[:, 0] * W + c[:, 1]) * H + c[:, 2]


def build_rulebook(in_coords: np.ndarray, spatial_shape, kind: str, stride: int = 1) -> Rulebook:
    """Gather/scatter pair lists for a 3x3x3 kernel over active coords."""
    in_coords = np.asarray(in_coords, dtype=np.int64).reshape(-1, 3)
    n = in_coords.shape[0]
    in_keys = _keys(in_coords, spatial_shape)
    order = np.argsort(in_keys, kind="stable")
    sorted_keys = in_keys[order]

    if kind == "submanifold":
        if stride != 1:
            raise ValueError("submanifold layers have stride 1")
        out_coords = in_coords
        out_shape = tuple(spatial_shape)
        taps_in, taps_out = [], []
        if n == 0:
            return Rulebook([np.zeros(0, np.int64)] * 27, [np.zeros(0, np.int64)] * 27,
                            in_coords.astype(np.int32), out_shape, kind, 1)
        for t in range(27):
            cand = out_coords + _TAP_OFFSETS[t]
            ok = np.all((cand >= 0) & (cand < np.asarray(spatial_shape)), axis=1)
            idx_out = np.nonzero(ok)[0]
            ck = _keys(cand[ok], spatial_shape)
            pos = np.searchsorted(sorted_keys, ck)
            pos = np.minimum(pos, n - 1)
            found = sorted_keys[pos] == ck
            taps_in.append(order[pos[found]])
            taps_out.append(idx_out[found])
        return Rulebook(taps_in, taps_out, in_coords.astype(np.int32), out_shape, kind, 1)

    if kind != "strided":
        raise ValueError(f"unknown rulebook kind {kind!r}")
    s = stride
    out_shape = tuple(-(-dim // s) for dim in spatial_shape)
    pairs_t, pairs_in, pairs_o = [], [], []
    for t in range(27):
        num = in_coords - _TAP_OFFSETS[t]
        ok = np.all(num % s == 0, axis=1)
        o = num[ok] // s
        inside = np.all((o >= 0) & (o < np.asarray(out_shape)), axis=1)
        idx_in = np.nonzero(ok)[0][inside]
        o = o[inside]
        pairs_t.append(np.full(len(idx_in), t, np.int64))
        pairs_in.append(idx_in)
        pairs_o.append(o)
    all_t = np.concatenate(pairs_t)
    all_in = np.concatenate(pairs_in)
    all_o = np.concatenate(pairs_o) if all_in.size else np.zeros((0, 3), np.int64)
    o_keys = _keys(all_o, out_shape) if all_in.size else np.zeros(0, np.int64)
    uniq, inverse = np.unique(o_keys, return_inverse=True)
    _, W, H = out_shape
    out_coords = np.stack([uniq // (W * H), (uniq // H) % W, uniq % H], axis=1).astype(np.int32)
    taps_in = [all_in[all_t == t] for t in range(27)]
    taps_out = [inverse[all_t == t] for t in range(27)]
    return Rulebook(taps_in, taps_out, out_coords, out_shape, kind, s)


def sparse_conv_op(feats: Var, weight: Var, bias: Var | None, rb: Rulebook) -> Var:
    """Raw gather-multiply-scatter; feats (N, Cin), weight (27, Cin, Cout)."""
    if feats.value.shape[1] != weight.value.shape[1]:
        raise ShapeError(
            f"sparse conv expects {weight.value.shape[1]} input channels, got {feats.value.shape[1]}"
        )
    m = rb.out_coords.shape[0]
    cout = weight.value.shape[2]
    out = np.zeros((m, cout), dtype=feats.value.dtype)
    for t in range(27):
        ti, to = rb.taps_in[t], rb.taps_out[t]
        if len(ti):
            out[to] += feats.value[ti] @ weight.value[t]
    if bias is not None:
        out = out + bias.value[None, :]

    def bwd(g):
        grad_f = np.zeros_like(feats.value)
        grad_w = np.zeros_like(weight.value)
        for t in range(27):
            ti, to = rb.taps_in[t], rb.taps_out[t]
            if len(ti):
                gt = g[to]
                grad_f[ti] += gt @ weight.value[t].T
                grad_w[t] = feats.value[ti].T @ gt
        if bias is not None:
            return grad_f, grad_w, g.sum(axis=0)
        return grad_f, grad_w

    parents = (feats, weight) if bias is None else (feats, weight, bias)
    return Var(out, parents, bwd, op="sparse_conv")


class SparseConvLayer:
    """3x3x3 sparse conv + BatchNorm + optional ReLU."""

    def __init__(self, store: ParamStore, prefix: str, kind: str, stride: int,
                 in_ch: int, out_ch: int, act: bool = True):
        if kind == "submanifold" and stride != 1:
            raise ValueError("submanifold layers have stride 1")
        self.kind, self.stride = kind, stride
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = store.conv_weight(f"{prefix}.weight", (27, in_ch, out_ch), fan_in=27 * in_ch)
        self.bias = store.bias(f"{prefix}.bias", out_ch)
        self.bn = BatchNorm(store, f"{prefix}.bn", out_ch)
        self.act = act

    def forward_feats(self, feats: Var, rb: Rulebook, train: bool) -> Var:
        y = sparse_conv_op(feats, self.weight, self.bias, rb)
        if y.value.shape[0]:
            y = transpose(self.bn(transpose(y, (1, 0)), train), (1, 0))
        if self.act:
            y = relu(y)
        return y


def sparse_conv_forward(layer: SparseConvLayer, vol: SparseVolume, rb: Rulebook,
                        train: bool = False) -> SparseVolume:
    out = layer.forward_feats(Var(vol.feats), rb, train)
    return SparseVolume(rb.out_coords, out.value, rb.out_shape)


class ResidualBlock:
    """Identity plus two submanifold convs (second one linear before the add)."""

    def __init__(self, store: ParamStore, prefix: str, ch: int):
        self.conv1 = SparseConvLayer(store, f"{prefix}.conv1", "submanifold", 1, ch, ch, act=True)
        self.conv2 = SparseConvLayer(store, f"{prefix}.conv2", "submanifold", 1, ch, ch, act=False)

    def forward_feats(self, feats: Var, rb: Rulebook, train: bool) -> Var:
        y = self.conv1.forward_feats(feats, rb, train)
        y = self.conv2.forward_feats(y, rb, train)
        return relu(add(feats, y))


class ResVoxelNet:
    """Four stages at 1x/2x/4x/8x downsampling; channels grow per config."""

    def __init__(self, store: ParamStore, in_ch: int = 4,
                 channels: tuple[int, ...] = (16, 32, 64, 128), n_res: int = 1):
        self.channels = tuple(channels)
        self.stages = []
        prev = in_ch
        for i, ch in enumerate(self.channels):
            kind = "submanifold" if i == 0 else "strided"
            stride = 1 if i == 0 else 2
            head = SparseConvLayer(store, f"backbone.stage{i}.down", kind, stride, prev, ch)
            blocks = [
                ResidualBlock(store, f"backbone.stage{i}.res{j}", ch) for j in range(n_res)
            ]
            self.stages.append((head, blocks))
            prev = ch

    def forward(self, coords: np.ndarray, feats: Var, spatial_shape, train: bool):
        """Returns (coords, feats Var, spatial_shape) of the 8x volume."""
        for head, blocks in self.stages:
            rb_head = build_rulebook(coords, spatial_shape, head.kind, head.stride)
            feats = head.forward_feats(feats, rb_head, train)
            coords, spatial_shape = rb_head.out_coords, rb_head.out_shape
            if blocks:
                rb_sub = build_rulebook(coords, spatial_shape, "submanifold", 1)
                for blk in blocks:
                    feats = blk.forward_feats(feats, rb_sub, train)
        return coords, feats, spatial_shape


def resvoxelnet_forward(net: ResVoxelNet, vol: SparseVolume, train: bool = False) -> SparseVolume:
    if vol.channels != net.stages[0][0].in_ch:
        raise ShapeError(f"backbone expects {net.stages[0][0].in_ch} input channels, got {vol.channels}")
    coords, feats, shape = net.forward(vol.coords, Var(vol.feats), vol.spatial_shape, train)
    return SparseVolume(coords, feats.value, shape)
