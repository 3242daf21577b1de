"""2D conv / norm building blocks shared by the BEV tower and the heads.

All forward functions consume and produce autodiff Vars; adjoints are
hand-derived inside each fused op. Maps are channel-first (C, L, W).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Param, Var, add, as_var, div, mul, relu, reshape, sqrt, square, sub, vmean
from .types import ShapeError


class ParamStore:
    """Flat registry of named parameters; order of creation is the
    checkpoint order."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Param] = {}
        self.norms: list["BatchNorm"] = []

    def add(self, name: str, value: np.ndarray, trainable: bool = True, decay: bool = True,
            lr_mult: float = 1.0) -> Param:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, value.astype(self.dtype), trainable=trainable, decay=decay,
                  lr_mult=lr_mult)
        self.params[name] = p
        return p

    def conv_weight(self, name: str, shape: tuple[int, ...], fan_in: int, zero: bool = False) -> Param:
        if zero:
            w = np.zeros(shape)
        else:
            w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return self.add(name, w)

    def bias(self, name: str, n: int, fill=0.0) -> Param:
        return self.add(name, np.broadcast_to(np.asarray(fill, np.float64), (n,)).copy(),
                        decay=False)

    def trainable(self) -> list[Param]:
        return [p for p in self.params.values() if p.trainable]


# ---------------------------------------------------------------------------
# fused 2D convolution ops


def conv2d(x: Var, w: Var, b: Var | None, stride: int = 1, pad: int = 1) -> Var:
    """Cross-correlation with zero padding; x (Cin, L, W), w (Cout, Cin, k, k)."""
    x, w = as_var(x), as_var(w)
    cin, L, W = x.value.shape
    cout, cin_w, k, _ = w.value.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight expects {cin_w}")
    s = stride
    Lo = (L + 2 * pad - k) // s + 1
    Wo = (W + 2 * pad - k) // s + 1
    xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((cin, k, k, Lo, Wo), dtype=x.value.dtype)
    for a in range(k):
        for c in range(k):
            cols[:, a, c] = xp[:, a : a + s * Lo : s, c : c + s * Wo : s]
    cols2 = cols.reshape(cin * k * k, Lo * Wo)
    wmat = w.value.reshape(cout, cin * k * k)
    out = (wmat @ cols2).reshape(cout, Lo, Wo)
    if b is not None:
        out = out + b.value[:, None, None]

    def bwd(g):
        gmat = g.reshape(cout, Lo * Wo)
        grad_w = (gmat @ cols2.T).reshape(w.value.shape)
        grad_cols = (wmat.T @ gmat).reshape(cin, k, k, Lo, Wo)
        grad_xp = np.zeros_like(xp)
        for a in range(k):
            for c in range(k):
                grad_xp[:, a : a + s * Lo : s, c : c + s * Wo : s] += grad_cols[:, a, c]
        grad_x = grad_xp[:, pad : pad + L, pad : pad + W]
        if b is not None:
            return grad_x, grad_w, g.sum(axis=(1, 2))
        return grad_x, grad_w

    parents = (x, w) if b is None else (x, w, b)
    return Var(out, parents, bwd, op="conv2d")


def conv2d_transpose(x: Var, w: Var, b: Var | None, stride: int, pad: int,
                     out_hw: tuple[int, int]) -> Var:
    """Transpose convolution; raw output is cropped (never padded) to out_hw,
    top-left aligned. x (Cin, n, m), w (Cout, Cin, k, k)."""
    x, w = as_var(x), as_var(w)
    cin, n, m = x.value.shape
    cout, cin_w, k, _ = w.value.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {cin}, weight expects {cin_w}")
    s = stride
    rawL, rawW = (n - 1) * s + k, (m - 1) * s + k
    Ht, Wt = out_hw
    if rawL - 2 * pad < Ht or rawW - 2 * pad < Wt:
        raise ShapeError(
            f"transpose conv raw output {(rawL - 2 * pad, rawW - 2 * pad)} smaller than target {out_hw}"
        )
    raw = np.zeros((cout, rawL, rawW), dtype=x.value.dtype)
    xf = x.value.reshape(cin, n * m)
    for a in range(k):
        for c in range(k):
            t = (w.value[:, :, a, c] @ xf).reshape(cout, n, m)
            raw[:, a : a + s * n : s, c : c + s * m : s] += t
    out = raw[:, pad : pad + Ht, pad : pad + Wt]
    if b is not None:
        out = out + b.value[:, None, None]

    def bwd(g):
        graw = np.zeros((cout, rawL, rawW), dtype=g.dtype)
        graw[:, pad : pad + Ht, pad : pad + Wt] = g
        grad_x = np.zeros_like(x.value)
        grad_w = np.zeros_like(w.value)
        for a in range(k):
            for c in range(k):
                gs = graw[:, a : a + s * n : s, c : c + s * m : s].reshape(cout, n * m)
                grad_x += (w.value[:, :, a, c].T @ gs).reshape(cin, n, m)
                grad_w[:, :, a, c] = gs @ xf.T
        if b is not None:
            return grad_x, grad_w, g.sum(axis=(1, 2))
        return grad_x, grad_w

    parents = (x, w) if b is None else (x, w, b)
    return Var(out.copy(), parents, bwd, op="conv2d_transpose")


_TAP_OFFSETS_2D = np.array([(a - 1, c - 1) for a in range(3) for c in range(3)], dtype=np.float64)


def bilinear_tap_sample(x: Var, pos0: Var, pos1: Var) -> Var:
    """Sample x (C, L, W) at 9 fractional positions per output cell.

    pos0/pos1 are (9, Lo, Wo) absolute row/col sample coordinates; points
    outside the map read as zero. Returns (9, C, Lo, Wo). Differentiable in
    x and in both position grids.
    """
    x, pos0, pos1 = as_var(x), as_var(pos0), as_var(pos1)
    C, L, W = x.value.shape
    dt = x.value.dtype
    p0 = pos0.value.astype(np.float64)
    p1 = pos1.value.astype(np.float64)
    i0 = np.floor(p0)
    j0 = np.floor(p1)
    f0 = (p0 - i0).astype(dt)
    f1 = (p1 - j0).astype(dt)
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)

    xf = x.value.reshape(C, L * W)
    corners = []
    for di, dj, wgt, dwdf0, dwdf1 in (
        (0, 0, (1 - f0) * (1 - f1), -(1 - f1), -(1 - f0)),
        (0, 1, (1 - f0) * f1, -f1, (1 - f0)),
        (1, 0, f0 * (1 - f1), (1 - f1), -f0),
        (1, 1, f0 * f1, f1, f0),
    ):
        ci, cj = i0 + di, j0 + dj
        valid = ((ci >= 0) & (ci < L) & (cj >= 0) & (cj < W)).astype(dt)
        flat = np.clip(ci, 0, L - 1) * W + np.clip(cj, 0, W - 1)
        vals = xf[:, flat]  # (C, 9, Lo, Wo)
        corners.append((flat, valid, wgt, dwdf0, dwdf1, vals))

    acc = None
    for flat, valid, wgt, _, _, vals in corners:
        term = vals * (wgt * valid)[None]
        acc = term if acc is None else acc + term
    out = np.moveaxis(acc, 0, 1).copy()  # (9, C, Lo, Wo)

    def bwd(g):
        gc = np.moveaxis(g, 1, 0)  # (C, 9, Lo, Wo)
        grad_pos0 = np.zeros_like(p0, dtype=dt)
        grad_pos1 = np.zeros_like(p1, dtype=dt)
        grad_xf = np.zeros((L * W, C), dtype=dt)
        for flat, valid, wgt, dwdf0, dwdf1, vals in corners:
            gval = (gc * vals).sum(axis=0)  # (9, Lo, Wo)
            grad_pos0 += gval * dwdf0 * valid
            grad_pos1 += gval * dwdf1 * valid
            contrib = (gc * (wgt * valid)[None]).reshape(C, -1).T
            np.add.at(grad_xf, flat.reshape(-1), contrib)
        return grad_xf.T.reshape(C, L, W), grad_pos0, grad_pos1

    return Var(out, (x, pos0, pos1), bwd, op="bilinear_sample")


def base_tap_positions(Lo: int, Wo: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer 3x3 tap positions per output cell: (9, Lo, Wo) row and col."""
    ii = np.arange(Lo)[None, :, None] + _TAP_OFFSETS_2D[:, 0][:, None, None]
    jj = np.arange(Wo)[None, None, :] + _TAP_OFFSETS_2D[:, 1][:, None, None]
    return (
        np.broadcast_to(ii, (9, Lo, Wo)).copy(),
        np.broadcast_to(jj, (9, Lo, Wo)).copy(),
    )


# ---------------------------------------------------------------------------
# layers


class BatchNorm:
    """Per-channel batch normalization over the non-channel axis.

    Accepts (C, M)-shaped Vars. Running statistics are stored as
    non-trainable params so they travel with checkpoints.
    """

    def __init__(self, store: ParamStore, prefix: str, channels: int,
                 eps: float = 1e-5, momentum: float = 0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = store.add(f"{prefix}.gamma", np.ones(channels), decay=False)
        self.beta = store.add(f"{prefix}.beta", np.zeros(channels), decay=False)
        self.run_mean = store.add(f"{prefix}.run_mean", np.zeros(channels), trainable=False)
        self.run_var = store.add(f"{prefix}.run_var", np.ones(channels), trainable=False)
        store.norms.append(self)

    def __call__(self, x: Var, train: bool) -> Var:
        if x.value.shape[1] == 0:
            return x
        if train:
            mu = vmean(x, axis=1, keepdims=True)
            xc = sub(x, mu)
            var = vmean(square(xc), axis=1, keepdims=True)
            den = sqrt(add(var, as_var(np.array(self.eps, dtype=x.dtype))))
            xhat = div(xc, den)
            m = self.momentum
            self.run_mean.value = (1 - m) * self.run_mean.value + m * mu.value.ravel().astype(
                self.run_mean.value.dtype
            )
            self.run_var.value = (1 - m) * self.run_var.value + m * var.value.ravel().astype(
                self.run_var.value.dtype
            )
        else:
            mu = self.run_mean.value[:, None]
            den = np.sqrt(self.run_var.value[:, None] + self.eps)
            xhat = mul(add(x, as_var(-mu)), as_var(1.0 / den))
        g = reshape(self.gamma, (-1, 1))
        b = reshape(self.beta, (-1, 1))
        return add(mul(xhat, g), b)

    def apply_map(self, x: Var, train: bool) -> Var:
        """BatchNorm for (C, L, W) maps."""
        C, L, W = x.value.shape
        return reshape(self(reshape(x, (C, L * W)), train), (C, L, W))


class Conv2d:
    """3x3 or 1x1 conv with optional BN + ReLU."""

    def __init__(self, store: ParamStore, prefix: str, cin: int, cout: int,
                 k: int = 3, stride: int = 1, norm: bool = True, act: bool = True,
                 bias_fill: float = 0.0, zero_init: bool = False):
        self.k, self.stride, self.pad = k, stride, k // 2
        self.w = store.conv_weight(f"{prefix}.weight", (cout, cin, k, k), fan_in=cin * k * k,
                                   zero=zero_init)
        self.b = store.bias(f"{prefix}.bias", cout, fill=bias_fill)
        self.bn = BatchNorm(store, f"{prefix}.bn", cout) if norm else None
        self.act = act

    def __call__(self, x: Var, train: bool) -> Var:
        out = conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)
        if self.bn is not None:
            out = self.bn.apply_map(out, train)
        if self.act:
            out = relu(out)
        return out


class ConvTranspose2d:
    def __init__(self, store: ParamStore, prefix: str, cin: int, cout: int,
                 k: int, stride: int, pad: int, norm: bool = True):
        self.k, self.stride, self.pad = k, stride, pad
        self.w = store.conv_weight(f"{prefix}.weight", (cout, cin, k, k), fan_in=cin * k * k)
        self.b = store.bias(f"{prefix}.bias", cout)
        self.bn = BatchNorm(store, f"{prefix}.bn", cout) if norm else None

    def __call__(self, x: Var, out_hw: tuple[int, int], train: bool) -> Var:
        out = conv2d_transpose(x, self.w, self.b, self.stride, self.pad, out_hw)
        if self.bn is not None:
            out = self.bn.apply_map(out, train)
        return relu(out)
