"""Optimizer, schedule, checkpoint format and the desk-scale training loop.

Determinism contract: the shuffle for epoch e and the augmentation stream
for (step, scene-in-batch) are derived from SeedSequence([seed, ...]), so a
resumed run consumes exactly the same randomness as an uninterrupted one.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Var, backward, zero_grads
from .config import Config
from .data_ingest import AugmentConfig, augment, build_gt_database, crop_to_range, load_split
from .detect_head import build_targets
from .model import Detector
from .types import ConfigError, DataError, Scene, TrainingError
from .voxel_grid import voxelize

CKPT_MAGIC = b"MGAF"
CKPT_VERSION = 1


def total_loss(l_cls: Var, l_box: Var, l_iou: Var, l_sem: Var) -> Var:
    """Equal-weight sum of the four task losses."""
    return ad.add(ad.add(l_cls, l_box), ad.add(l_iou, l_sem))


# ---------------------------------------------------------------------------
# one-cycle schedule


def one_cycle(step: int, total_steps: int, cfg: Config) -> tuple[float, float]:
    """(lr, beta1) at a step: cosine warmup to lr_max over warmup_frac of the
    run, cosine anneal to lr_max/div^2; beta1 mirrors max -> min -> max."""
    lr_lo = cfg.lr_max / cfg.div_factor
    lr_end = cfg.lr_max / (cfg.div_factor * cfg.div_factor)
    if total_steps < 2:
        return lr_lo, cfg.momentum_max
    warm = max(1, round(cfg.warmup_frac * total_steps))
    warm = min(warm, total_steps - 1)
    if step <= warm:
        f = step / warm
        lr = lr_lo + (cfg.lr_max - lr_lo) * 0.5 * (1.0 - math.cos(math.pi * f))
        b1 = cfg.momentum_max + (cfg.momentum_min - cfg.momentum_max) * 0.5 * (
            1.0 - math.cos(math.pi * f)
        )
    else:
        f = (step - warm) / max(1, total_steps - 1 - warm)
        lr = lr_end + (cfg.lr_max - lr_end) * 0.5 * (1.0 + math.cos(math.pi * f))
        b1 = cfg.momentum_max + (cfg.momentum_min - cfg.momentum_max) * 0.5 * (
            1.0 + math.cos(math.pi * f)
        )
    return lr, b1


# ---------------------------------------------------------------------------
# AdamW


class AdamW:
    """Decoupled weight decay; beta1 follows the schedule, so the first-moment
    bias correction tracks the running product of beta1 values."""

    def __init__(self, params: dict[str, Param], weight_decay: float,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = {n: p for n, p in params.items() if p.trainable}
        self.weight_decay = weight_decay
        self.beta2 = beta2
        self.eps = eps
        self.m = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        self.t = 0
        self.beta1_prod = 1.0

    def step(self, lr: float, beta1: float) -> None:
        self.t += 1
        self.beta1_prod *= beta1
        b2corr = 1.0 - self.beta2**self.t
        b1corr = 1.0 - self.beta1_prod
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.value)
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / b1corr
            vhat = v / b2corr
            plr = lr * p.lr_mult
            if self.weight_decay and p.decay:
                p.value -= (plr * self.weight_decay) * p.value
            p.value -= plr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        out["opt.meta"] = np.array([self.t, self.beta1_prod], dtype=np.float64)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.params:
            self.m[n] = arrays[f"opt.m.{n}"].astype(self.m[n].dtype).reshape(self.m[n].shape)
            self.v[n] = arrays[f"opt.v.{n}"].astype(self.v[n].dtype).reshape(self.v[n].shape)
        meta = arrays["opt.meta"]
        self.t = int(meta[0])
        self.beta1_prod = float(meta[1])


def clip_gradients(params: dict[str, Param], max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    sq = 0.0
    grads = [p.grad for p in params.values() if p.trainable and p.grad is not None]
    for g in grads:
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """magic `MGAF`, version u32, count u32, then per array: u32 name length,
    utf-8 name, u32 rank, u32 dims, little-endian f32 payload."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            f.write(a.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.copy()
    return out


def model_arrays(model: Detector) -> dict[str, np.ndarray]:
    return {name: p.value for name, p in model.store.params.items()}


def save_model(path: str | Path, model: Detector, opt: AdamW | None = None,
               next_epoch: int | None = None) -> None:
    arrays = dict(model_arrays(model))
    if opt is not None:
        arrays.update(opt.state_arrays())
    if next_epoch is not None:
        arrays["meta.next_epoch"] = np.array([next_epoch], dtype=np.float64)
    save_checkpoint(path, arrays)


def load_model(path: str | Path, model: Detector, opt: AdamW | None = None) -> int:
    """Restore parameters (and optimizer state when given); returns the next
    epoch index recorded in the checkpoint (0 when absent)."""
    arrays = load_checkpoint(path)
    for name, p in model.store.params.items():
        if name not in arrays:
            raise ConfigError(f"checkpoint-config mismatch: missing parameter {name!r}")
        if tuple(arrays[name].shape) != tuple(p.value.shape):
            raise ConfigError(
                f"checkpoint-config mismatch: {name!r} has shape {arrays[name].shape}, "
                f"model expects {p.value.shape}"
            )
        p.value = arrays[name].astype(p.value.dtype)
    if opt is not None:
        opt.load_state(arrays)
    return int(arrays.get("meta.next_epoch", np.zeros(1))[0])


# ---------------------------------------------------------------------------
# training loop


LOG_HEADER = "step,lr,L_cls,L_box,L_iou,L_sem,L_total"


def recalibrate_bn(model: Detector, scenes: list[Scene], limit: int = 64) -> None:
    """Replace BN running statistics with the arithmetic mean of per-scene
    batch statistics, so eval-mode normalization matches the population the
    detector was trained on. Setting momentum to 1/i during pass i turns the
    EMA update into an exact cumulative average."""
    bns = model.store.norms
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.run_mean.value[:] = 0
        bn.run_var.value[:] = 0
    try:
        for i, scene in enumerate(scenes[:limit]):
            for bn in bns:
                bn.momentum = 1.0 / (i + 1)
            vol = model.prepare_scene(scene)
            model.forward(vol, train=True)
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m


def train_step_losses(model: Detector, scene: Scene) -> dict[str, Var]:
    """Forward + loss graph for one prepared (already augmented) scene."""
    cropped = crop_to_range(scene, model.spec)
    vol = voxelize(cropped.cloud, model.spec)
    outs = model.forward(vol, train=True)
    targets = build_targets(cropped.gt_boxes, model.cfg.num_classes, model.geom, model.codec)
    samples = model.select_samples(outs, cropped.gt_boxes)
    return model.compute_losses(outs, targets, samples)


def train(cfg: Config, data_dir: str | Path, out_dir: str | Path,
          resume: bool = False, quiet: bool = False,
          stop_after: int | None = None) -> Detector:
    """Run the training loop; stop_after interrupts after that many epochs
    (checkpoint retained) so a later resume continues the identical schedule."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = load_split(data_dir, classes=cfg.classes)
    if not scenes:
        raise DataError(f"no scenes found in {data_dir}")
    db = build_gt_database(scenes) if cfg.augment else None
    aug_cfg = AugmentConfig(max_paste=cfg.max_paste)

    model = Detector(cfg)
    opt = AdamW(model.store.params, weight_decay=cfg.weight_decay)
    n = len(scenes)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    ckpt_path = out_dir / "ckpt.mgaf"
    log_path = out_dir / "train_log.csv"
    cfg.save(out_dir / "config.cfg")
    start_epoch = 0
    if resume:
        start_epoch = load_model(ckpt_path, model, opt)
        # the f32 checkpoint quantizes the beta1 running product; replaying
        # the deterministic schedule restores it exactly
        prod = 1.0
        for s in range(opt.t):
            prod *= one_cycle(s, total_steps, cfg)[1]
        opt.beta1_prod = prod
    if not resume or not log_path.exists():
        log_path.write_text(LOG_HEADER + "\n")

    log_f = open(log_path, "a")
    try:
        for epoch in range(start_epoch, cfg.epochs):
            if stop_after is not None and epoch >= stop_after:
                return model
            order = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 7919, epoch])
            ).permutation(n)
            for b in range(steps_per_epoch):
                step = epoch * steps_per_epoch + b
                lr, beta1 = one_cycle(step, total_steps, cfg)
                batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                zero_grads(model.store.params.values())
                parts = {k: 0.0 for k in ("cls", "box", "iou", "sem", "total")}
                for i, scene_idx in enumerate(batch):
                    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step, i]))
                    scene = scenes[int(scene_idx)]
                    if cfg.augment:
                        scene = augment(scene, db, rng, aug_cfg)
                    losses = train_step_losses(model, scene)
                    t = float(losses["total"].value)
                    if not math.isfinite(t):
                        raise TrainingError(
                            f"loss became non-finite at step {step}; last checkpoint kept at {ckpt_path}"
                        )
                    backward(ad.scale(losses["total"], 1.0 / len(batch)))
                    for k in parts:
                        parts[k] += float(losses[k].value) / len(batch)
                clip_gradients(model.store.params, cfg.grad_clip)
                opt.step(lr, beta1)
                log_f.write(
                    f"{step},{lr:.6g},{parts['cls']:.6g},{parts['box']:.6g},"
                    f"{parts['iou']:.6g},{parts['sem']:.6g},{parts['total']:.6g}\n"
                )
                log_f.flush()
                if not quiet and (step % 20 == 0 or step == total_steps - 1):
                    print(f"step {step}/{total_steps} lr={lr:.4g} L={parts['total']:.4g}", flush=True)
            save_model(ckpt_path, model, opt, next_epoch=epoch + 1)
        recalibrate_bn(model, scenes)
        save_model(ckpt_path, model, opt, next_epoch=cfg.epochs)
    finally:
        log_f.close()
    return model
