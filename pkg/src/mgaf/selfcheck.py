"""Self-contained invariant and gradient checks behind `mgaf selftest`."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import detect_head as dh
from . import iou_conf as ic
from .adfa import DeformConv2d, mask_loss
from .config import Config
from .decoder_eval import decode, extract_peaks
from .nn import ParamStore
from .sparse_backbone import build_rulebook, sparse_conv_op
from .types import Box3D, MapGeometry, SparseVolume
from .train_harness import AdamW, one_cycle

GEOM = MapGeometry(shape=(16, 16), x_min=0.0, y_min=-4.0, cell_x=0.5, cell_y=0.5, stride=8)
CODEC = dh.RotBinCodec(12)


def _rand_rect(rng, near=None):
    cx = rng.uniform(-5, 5) if near is None else near.cx + rng.uniform(-2, 2)
    cy = rng.uniform(-5, 5) if near is None else near.cy + rng.uniform(-2, 2)
    return ic.RotatedRect(cx, cy, rng.uniform(0.5, 5.0), rng.uniform(0.5, 3.0),
                          rng.uniform(0, 2 * math.pi))


def _rand_box(rng, near=None):
    x = rng.uniform(-5, 5) if near is None else near.x + rng.uniform(-2, 2)
    y = rng.uniform(-5, 5) if near is None else near.y + rng.uniform(-2, 2)
    z = rng.uniform(-1, 1) if near is None else near.z + rng.uniform(-1, 1)
    return Box3D(x, y, z, rng.uniform(0.5, 5.0), rng.uniform(0.5, 3.0),
                 rng.uniform(0.5, 2.5), rng.uniform(0, 2 * math.pi))


def check_gradients() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    # sparse conv
    mask = rng.uniform(size=(4, 4, 4)) < 0.35
    coords = np.argwhere(mask).astype(np.int32)
    feats = rng.normal(size=(len(coords), 2))
    for kind, stride in (("submanifold", 1), ("strided", 2)):
        rb = build_rulebook(coords, (4, 4, 4), kind, stride)
        proj = rng.normal(size=(rb.out_coords.shape[0], 3))
        worst = max(worst, ad.gradcheck_scalar_fn(
            lambda v: ad.vsum(ad.mul(sparse_conv_op(v[0], v[1], v[2], rb), ad.as_var(proj))),
            [feats, rng.normal(size=(27, 2, 3)), rng.normal(size=3)],
        ))
    # deformable conv (weights, offsets, modulation, input)
    store = ParamStore(np.random.default_rng(1), dtype=np.float64)
    layer = DeformConv2d(store, "d", 2, 3, norm=False)
    x = rng.normal(size=(2, 5, 5))
    proj = rng.normal(size=(3, 5, 5))

    def deform_fn(v):
        layer.w, layer.b = v[0], v[1]
        layer.w_off, layer.b_off = v[2], v[3]
        layer.w_mod, layer.b_mod = v[4], v[5]
        return ad.vsum(ad.mul(layer.raw_forward(v[6]), ad.as_var(proj)))

    worst = max(worst, ad.gradcheck_scalar_fn(deform_fn, [
        rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3),
        rng.normal(0, 0.2, size=(18, 2, 3, 3)), rng.normal(0, 0.2, size=18),
        rng.normal(0, 0.2, size=(9, 2, 3, 3)), rng.normal(0, 0.2, size=9),
        x,
    ], max_entries=60, rng=rng))
    # attention gate
    fmap = rng.normal(size=(2, 4, 4))
    logits = rng.normal(size=(1, 4, 4))
    proj2 = rng.normal(size=(2, 4, 4))
    worst = max(worst, ad.gradcheck_scalar_fn(
        lambda v: ad.vsum(ad.mul(ad.mul(v[0], ad.add(ad.as_var(np.ones(())),
                                                     ad.sigmoid(v[1]))), ad.as_var(proj2))),
        [fmap, logits],
    ))
    # the six losses
    t = dh.build_targets(
        [Box3D(3.2, -1.1, 0.2, 2.5, 1.2, 1.5, 0.8, 0), Box3D(6.1, 2.3, 0.0, 3.5, 1.8, 1.4, 4.2, 0)],
        1, GEOM, CODEC)
    p = rng.uniform(0.1, 0.9, size=(1, 16, 16))
    worst = max(worst, ad.gradcheck_scalar_fn(
        lambda v: dh.cls_focal_loss(v[0], t.heatmap, t.n_objects), [p], max_entries=80, rng=rng))
    worst = max(worst, ad.gradcheck_scalar_fn(
        lambda v: dh.center_l1_loss(v[0], t.offset, t.center_mask, t.n_objects),
        [rng.normal(size=(2, 16, 16))], max_entries=80, rng=rng))
    worst = max(worst, ad.gradcheck_scalar_fn(
        lambda v: dh.rot_loss(v[0], v[1], t.rot_bin, t.rot_res, t.center_mask, t.n_objects),
        [rng.normal(size=(12, 16, 16)), rng.normal(size=(12, 16, 16))],
        max_entries=60, rng=rng))

    def corner_fn(v):
        heads = {"offset": v[0], "z": v[1], "size": v[2], "rot_res": v[3]}
        corners = dh.decode_center_corners(heads, t, GEOM, CODEC)
        return dh.corner_loss(corners, t.center_boxes, t.n_objects)

    worst = max(worst, ad.gradcheck_scalar_fn(corner_fn, [
        t.offset.astype(np.float64) + rng.normal(0, 0.05, (2, 16, 16)),
        t.zmap.astype(np.float64) + rng.normal(0, 0.05, (1, 16, 16)),
        t.sizemap.astype(np.float64) + np.abs(rng.normal(0, 0.05, (3, 16, 16))) + 0.1,
        rng.normal(0, 0.3, size=(12, 16, 16)),
    ], max_entries=40, rng=rng))
    conf_targets = rng.uniform(0, 1, 6)
    worst = max(worst, ad.gradcheck_scalar_fn(
        lambda v: ic.iou_conf_loss(v[0], conf_targets),
        [rng.uniform(0.05, 0.95, 6)]))
    seg_target = (rng.uniform(size=(1, 6, 6)) < 0.4).astype(np.float64)
    worst = max(worst, ad.gradcheck_scalar_fn(
        lambda v: mask_loss(v[0], seg_target),
        [rng.normal(size=(1, 6, 6))]))
    return True, f"worst rel err {worst:.2e}"


def check_iou_oracle(n_pairs: int = 150) -> tuple[bool, str]:
    from .detmath import det_cos, det_sin

    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(n_pairs):
        a = _rand_box(rng)
        b = _rand_box(rng, near=a)
        got = ic.iou_3d(a, b)
        ref = _raster_iou_3d(a, b)
        worst = max(worst, abs(got - ref))
        if abs(got - ref) > 0.02:
            return False, f"3D IoU off by {abs(got - ref):.4f}"
        if ic.iou_3d(b, a) != got:
            return False, "asymmetric 3D IoU"
    return True, f"worst |analytic-raster| {worst:.4f} over {n_pairs} pairs"


def _raster_iou_3d(a: Box3D, b: Box3D, n: int = 200) -> float:
    def aabb(box):
        c, s = abs(math.cos(box.theta)), abs(math.sin(box.theta))
        ex = 0.5 * (box.l * c + box.w * s)
        ey = 0.5 * (box.l * s + box.w * c)
        return box.x - ex, box.x + ex, box.y - ey, box.y + ey

    ax0, ax1, ay0, ay1 = aabb(a)
    bx0, bx1, by0, by1 = aabb(b)
    az0, az1 = a.z - a.h / 2, a.z + a.h / 2
    bz0, bz1 = b.z - b.h / 2, b.z + b.h / 2
    x0, x1 = max(ax0, bx0), min(ax1, bx1)
    y0, y1 = max(ay0, by0), min(ay1, by1)
    z0, z1 = max(az0, bz0), min(az1, bz1)
    if x0 >= x1 or y0 >= y1 or z0 >= z1:
        return 0.0
    xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    ys = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    zs = z0 + (np.arange(n) + 0.5) * (z1 - z0) / n

    def in_rect(box):
        c, s = math.cos(box.theta), math.sin(box.theta)
        dx = xs[:, None] - box.x
        dy = ys[None, :] - box.y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (np.abs(u) <= box.l / 2) & (np.abs(v) <= box.w / 2)

    nxy = float((in_rect(a) & in_rect(b)).sum())
    nz = float(((zs >= az0) & (zs <= az1) & (zs >= bz0) & (zs <= bz1)).sum())
    cell = ((x1 - x0) / n) * ((y1 - y0) / n) * ((z1 - z0) / n)
    inter = nxy * nz * cell
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def check_encode_decode(n_boxes: int = 50) -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    used = set()
    boxes = []
    while len(boxes) < n_boxes:
        px, py = rng.uniform(0.5, 15.5), rng.uniform(0.5, 15.5)
        if (int(px), int(py)) in used:
            continue
        used.add((int(px), int(py)))
        boxes.append(Box3D(GEOM.x_min + px * GEOM.cell_x, GEOM.y_min + py * GEOM.cell_y,
                           rng.uniform(-1, 1), rng.uniform(1, 4), rng.uniform(0.5, 2),
                           rng.uniform(0.5, 2), rng.uniform(0, 2 * math.pi)))
    t = dh.build_targets(boxes, 1, GEOM, CODEC)
    rot_bin = np.zeros((12, 16, 16), np.float32)
    rot_res = np.zeros_like(rot_bin)
    for u, v in np.argwhere(t.center_mask):
        rot_bin[t.rot_bin[u, v], u, v] = 1.0
        rot_res[t.rot_bin[u, v], u, v] = t.rot_res[u, v]
    maps = {"offset": t.offset, "z": t.zmap, "size": t.sizemap,
            "rot_bin": rot_bin, "rot_res": rot_res}
    peaks = [(0, int(u), int(v), 1.0) for u, v in np.argwhere(t.center_mask)]
    dets = decode(peaks, maps, GEOM, CODEC, recalibrated=False)
    by_pixel = {d.pixel: d.box for d in dets}
    worst = 0.0
    for b in boxes:
        u = int((b.x - GEOM.x_min) / GEOM.cell_x)
        v = int((b.y - GEOM.y_min) / GEOM.cell_y)
        d = by_pixel[(u, v)]
        err = max(abs(d.x - b.x), abs(d.y - b.y), abs(d.z - b.z))
        terr = min(abs(d.theta - b.theta), 2 * math.pi - abs(d.theta - b.theta))
        worst = max(worst, err, terr)
        if err > 1e-5 or terr > 1e-5:
            return False, f"roundtrip error {max(err, terr):.2e}"
    return True, f"worst roundtrip err {worst:.2e} over {n_boxes} boxes"


def check_peaks_oracle(n_maps: int = 60) -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    for _ in range(n_maps):
        K = int(rng.integers(1, 3))
        L, W = int(rng.integers(2, 13)), int(rng.integers(2, 13))
        hm = rng.uniform(size=(K, L, W)).astype(np.float32)
        if rng.uniform() < 0.3:
            hm = ((hm * 4).round() / 4).astype(np.float32)
        got = extract_peaks(hm, top_k=10_000, mu_cls=0.0)
        want = _brute_peaks(hm)
        if got != want:
            return False, f"peak mismatch on {hm.shape} map"
    return True, f"{n_maps} maps match the exhaustive scan"


def _brute_peaks(hm):
    K, L, W = hm.shape
    out = []
    for k in range(K):
        for u in range(L):
            for v in range(W):
                val = hm[k, u, v]
                ok = True
                for du in (-1, 0, 1):
                    for dv in (-1, 0, 1):
                        if (du, dv) == (0, 0):
                            continue
                        nu, nv = u + du, v + dv
                        if 0 <= nu < L and 0 <= nv < W:
                            nval = hm[k, nu, nv]
                            if nval > val or (nval == val and nu * W + nv < u * W + v):
                                ok = False
                if ok:
                    out.append((k, u, v, float(val)))
    out.sort(key=lambda p: (-p[3], p[0], p[1], p[2]))
    return out


def check_dense_equivalence() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    mask = rng.uniform(size=(8, 8, 8)) < 0.2
    coords = np.argwhere(mask).astype(np.int32)
    vol = SparseVolume(coords, rng.normal(size=(len(coords), 3)).astype(np.float32), (8, 8, 8))
    worst = 0.0
    for kind, stride in (("submanifold", 1), ("strided", 2)):
        rb = build_rulebook(vol.coords, vol.spatial_shape, kind, stride)
        w = rng.normal(size=(27, 3, 4)).astype(np.float32)
        out = sparse_conv_op(ad.Var(vol.feats), ad.Var(w), None, rb).value
        dense = np.zeros((3, 8, 8, 8), np.float32)
        dense[:, coords[:, 0], coords[:, 1], coords[:, 2]] = vol.feats.T
        Lo = -(-8 // stride)
        ref = np.zeros((4, Lo, Lo, Lo), np.float32)
        for t in range(27):
            a, b, c = t // 9, (t // 3) % 3, t % 3
            for ox in range(Lo):
                ix = ox * stride + a - 1
                if not 0 <= ix < 8:
                    continue
                for oy in range(Lo):
                    iy = oy * stride + b - 1
                    if not 0 <= iy < 8:
                        continue
                    for oz in range(Lo):
                        iz = oz * stride + c - 1
                        if 0 <= iz < 8:
                            ref[:, ox, oy, oz] += dense[:, ix, iy, iz] @ w[t]
        want = ref[:, rb.out_coords[:, 0], rb.out_coords[:, 1], rb.out_coords[:, 2]].T
        diff = float(np.max(np.abs(out - want))) if len(out) else 0.0
        worst = max(worst, diff)
        if diff > 1e-4:
            return False, f"{kind} dense mismatch {diff:.2e}"
        if kind == "submanifold" and not np.array_equal(rb.out_coords, vol.coords):
            return False, "submanifold active set changed"
    return True, f"max |sparse - dense| {worst:.2e}"


def check_optimizer() -> tuple[bool, str]:
    theta = ad.Param("theta", np.array([2.4]))
    opt = AdamW({"theta": theta}, weight_decay=0.0)
    cfg = Config()
    total = 500
    for step in range(total):
        lr, b1 = one_cycle(step, total, cfg)
        theta.grad = 2.0 * (theta.value - 3.0)
        opt.step(lr, b1)
    err = abs(float(theta.value[0]) - 3.0)
    if err >= 1e-3:
        return False, f"quadratic converged to {theta.value[0]:.5f}"
    lr0, _ = one_cycle(0, total, cfg)
    lrs = [one_cycle(s, total, cfg)[0] for s in range(total)]
    if abs(lr0 - cfg.lr_max / cfg.div_factor) > 1e-12:
        return False, "lr(0) wrong"
    if abs(max(lrs) - cfg.lr_max) > 1e-12:
        return False, "max lr wrong"
    if lrs[-1] > cfg.lr_max / 100 + 1e-15:
        return False, "final lr too high"
    return True, f"|theta - 3| = {err:.2e}; lr endpoints ok"


def check_checkpoint_roundtrip() -> tuple[bool, str]:
    import tempfile
    from pathlib import Path

    from .model import Detector
    from .train_harness import load_model, save_model
    from .data_ingest import SynthConfig, synth_scene

    cfg = Config(classes=("Car",), range_min=(0.0, -6.4, -1.0), range_max=(12.8, 6.4, 3.0),
                 voxel_size=(0.4, 0.4, 0.5), backbone_channels=(4, 4, 8, 8), n_res=1,
                 tower_channels=8, c2=16, head_channels=8, n_lvl=1)
    model = Detector(cfg)
    scene = synth_scene(np.random.default_rng(0), SynthConfig())
    vol = model.prepare_scene(scene)
    before = model.forward(vol, train=False).head_maps_np()
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "ckpt.mgaf"
        save_model(path, model)
        model2 = Detector(cfg)
        load_model(path, model2)
        after = model2.forward(vol, train=False).head_maps_np()
    for k in before:
        if not np.array_equal(before[k], after[k]):
            return False, f"map {k} not bit-identical after reload"
    return True, "save/load/forward bit-identical"


CHECKS = [
    ("gradcheck", check_gradients),
    ("iou_oracle", check_iou_oracle),
    ("encode_decode", check_encode_decode),
    ("peaks_oracle", check_peaks_oracle),
    ("dense_equivalence", check_dense_equivalence),
    ("optimizer", check_optimizer),
    ("checkpoint_roundtrip", check_checkpoint_roundtrip),
]


def run_all(verbose: bool = True) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # noqa: BLE001 - selftest must report, not crash
            ok, detail = False, f"exception: {e}"
        all_ok &= ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
    return all_ok
