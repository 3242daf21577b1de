"""Command-line entry point: dataset generation, training, inference,
evaluation, calibration analysis and the selftest suite.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config
from .data_ingest import (
    DEFAULT_CLASSES,
    SynthClassSpec,
    SynthConfig,
    load_split,
    read_kitti_labels,
    synth_scene,
    write_kitti_label_file,
    write_scene,
)
from .types import ConfigError, DataError, GenerationError, TrainingError

SYNTH_CLASS_TABLE = {
    "Car": ((3.6, 4.6), (1.6, 2.0), (1.4, 1.8)),
    "Pedestrian": ((0.5, 0.9), (0.5, 0.8), (1.6, 1.9)),
    "Cyclist": ((1.5, 2.0), (0.4, 0.8), (1.5, 1.9)),
}


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _workers(requested: int) -> int:
    cap = os.environ.get("MGAF_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


def _load_config(path: str | None) -> Config:
    return Config.load(path) if path else Config()


def cmd_synth_gen(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    names = tuple(args.classes.split(","))
    for name in names:
        if name not in SYNTH_CLASS_TABLE:
            raise ConfigError(f"unknown synthetic class {name!r}; choose from {sorted(SYNTH_CLASS_TABLE)}")
    if args.config:
        cfg = Config.load(args.config)
        margin = 1.2
        x_range = (cfg.range_min[0] + 2.0, cfg.range_max[0] - margin)
        y_range = (cfg.range_min[1] + margin, cfg.range_max[1] - margin)
        ground = cfg.range_min[2]
    else:
        x_range, y_range, ground = (2.0, 12.0), (-5.5, 5.5), -1.0
    classes = tuple(
        SynthClassSpec(name, i, *SYNTH_CLASS_TABLE[name]) for i, name in enumerate(names)
    )
    scfg = SynthConfig(
        x_range=x_range, y_range=y_range, ground_z=ground,
        n_objects=(args.min_objects, args.max_objects), classes=classes,
        clutter_points=args.clutter,
    )
    rng = np.random.default_rng(np.random.SeedSequence([args.seed]))
    for i in range(args.scenes):
        scene = synth_scene(rng, scfg, frame_id=f"{i:06d}")
        write_scene(out, scene, classes=names)
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    from .plots import save_loss_curves
    from .train_harness import train

    cfg = _load_config(args.config)
    train(cfg, args.data, args.out, resume=args.resume, quiet=args.quiet)
    save_loss_curves(Path(args.out) / "train_log.csv", Path(args.out) / "loss_curves.svg")
    print(f"checkpoint and log written to {args.out}")
    return 0


def _load_model_for_infer(args):
    from .model import Detector
    from .train_harness import load_model

    ckpt = Path(args.ckpt)
    cfg_path = args.config or (ckpt.parent / "config.cfg")
    if not Path(cfg_path).exists():
        raise ConfigError(f"no config found at {cfg_path}; pass --config")
    cfg = Config.load(cfg_path)
    model = Detector(cfg)
    load_model(ckpt, model)
    return model, cfg


def cmd_infer(args) -> int:
    model, cfg = _load_model_for_infer(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = load_split(args.data, classes=cfg.classes)
    recal = not args.no_recalib
    for scene in scenes:
        dets = model.infer_scene(scene, recalibrate=recal)
        write_kitti_label_file(
            out / f"{scene.frame_id}.txt",
            [d.box for d in dets],
            scores=[d.final_score for d in dets],
            classes=cfg.classes,
        )
        if args.debug_maps:
            _dump_debug_maps(model, scene, Path(args.debug_maps))
    print(f"wrote detections for {len(scenes)} frames to {out}")
    return 0


def _dump_debug_maps(model, scene, out_dir: Path) -> None:
    from .adfa import mask_attention
    from .autodiff import stable_sigmoid
    from .plots import save_bev_map, save_grid_pgm

    out_dir.mkdir(parents=True, exist_ok=True)
    vol = model.prepare_scene(scene)
    outs = model.forward(vol, train=False)
    s_map = stable_sigmoid(outs.s_logits.value[0])
    g_l2 = np.linalg.norm(outs.g.value, axis=0)
    f0_l2 = np.linalg.norm(outs.f0.value, axis=0)
    np.save(out_dir / f"{scene.frame_id}_S.npy", s_map)
    np.save(out_dir / f"{scene.frame_id}_G.npy", outs.g.value)
    save_grid_pgm(s_map, out_dir / f"{scene.frame_id}_S.pgm")
    save_grid_pgm(g_l2, out_dir / f"{scene.frame_id}_G_l2.pgm")
    save_bev_map(s_map, out_dir / f"{scene.frame_id}_S.svg", "attention S")
    save_bev_map(g_l2, out_dir / f"{scene.frame_id}_G_l2.svg", "|G| per cell")
    save_bev_map(f0_l2, out_dir / f"{scene.frame_id}_F0_l2.svg", "|F0| per cell")


def _read_frames(dets_dir: Path, gts_dir: Path, classes):
    from .types import Detection

    det_frames, gt_frames = [], []
    gt_files = sorted(gts_dir.glob("*.txt"))
    if not gt_files:
        raise DataError(f"no label files in {gts_dir}")
    for gt_path in gt_files:
        gt_rows = read_kitti_labels(gt_path, classes=classes)
        gt_frames.append([r[0] for r in gt_rows])
        det_path = dets_dir / gt_path.name
        dets = []
        if det_path.exists():
            for box, score, _meta in read_kitti_labels(det_path, classes=classes, with_score=True):
                dets.append(Detection(box=box, class_id=box.class_id, cls_score=score,
                                      iou_conf=score, final_score=score, pixel=(0, 0)))
        det_frames.append(dets)
    return det_frames, gt_frames


def cmd_eval(args) -> int:
    from .decoder_eval import evaluate_ap
    from .plots import save_pr_curve

    classes = tuple(args.classes.split(",")) if args.classes else DEFAULT_CLASSES
    dets, gts = _read_frames(Path(args.dets), Path(args.gts), classes)
    pr = evaluate_ap(dets, gts, iou_thresh=args.iou, metric=args.metric)
    out = Path(args.out) if args.out else Path(args.dets)
    out.mkdir(parents=True, exist_ok=True)
    metric_name = f"ap_{args.metric}_iou{args.iou:g}"
    (out / "metrics.txt").write_text(f"{metric_name}={pr.ap:.6f}\nn_gt={pr.n_gt}\n")
    save_pr_curve(pr, out / "pr_curve.svg", title=f"{args.metric.upper()}@{args.iou:g}")
    print(f"{metric_name}={pr.ap:.6f}")
    return 0


def cmd_calib(args) -> int:
    from .decoder_eval import calibration_stats
    from .iou_conf import iou_3d
    from .plots import save_calibration_scatter

    classes = tuple(args.classes.split(",")) if args.classes else DEFAULT_CLASSES
    dets, gts = _read_frames(Path(args.dets), Path(args.gts), classes)
    plcc, srcc = calibration_stats(dets, gts)
    out = Path(args.out) if args.out else Path(args.dets)
    out.mkdir(parents=True, exist_ok=True)
    scores, ious = [], []
    for frame_dets, frame_gts in zip(dets, gts):
        for d in frame_dets:
            scores.append(d.final_score)
            ious.append(max((iou_3d(d.box, g) for g in frame_gts), default=0.0))
    (out / "calibration.txt").write_text(f"plcc={plcc:.6f}\nsrcc={srcc:.6f}\n")
    save_calibration_scatter(scores, ious, plcc, srcc, out / "calibration.svg")
    print(f"plcc={plcc:.6f}")
    print(f"srcc={srcc:.6f}")
    return 0


def cmd_selftest(args) -> int:
    from .selfcheck import run_all

    ok = run_all(verbose=True)
    if not ok:
        raise TrainingError("selftest failed")
    return 0


def cmd_dump_kernels(args) -> int:
    from .kernel_dumps import dump_kernels

    dump_kernels(args.out, args.seeds)
    print(f"wrote {args.seeds} kernel dump seeds to {args.out}")
    return 0


def build_parser() -> CliParser:
    p = CliParser(prog="mgaf", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("synth-gen", help="generate a synthetic KITTI-format split")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", default="Car")
    g.add_argument("--config", help="derive placement ranges from this config's grid")
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=3)
    g.add_argument("--clutter", type=int, default=40)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_synth_gen)

    t = sub.add_parser("train", help="train on a dataset split")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="run inference, write KITTI result files")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--config", help="defaults to config.cfg next to the checkpoint")
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--no-recalib", action="store_true",
                   help="final score = raw classification peak score")
    i.add_argument("--debug-maps", help="directory for S/G map exports")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="average precision against ground truth")
    e.add_argument("--dets", required=True)
    e.add_argument("--gts", required=True)
    e.add_argument("--iou", type=float, default=0.7)
    e.add_argument("--metric", choices=("3d", "bev"), default="3d")
    e.add_argument("--classes")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("calib", help="confidence calibration statistics")
    c.add_argument("--dets", required=True)
    c.add_argument("--gts", required=True)
    c.add_argument("--classes")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_calib)

    s = sub.add_parser("selftest", help="run the invariant and gradcheck suite")
    s.set_defaults(fn=cmd_selftest)

    d = sub.add_parser("dump-kernels", help="binary kernel dumps for parity checking")
    d.add_argument("--out", required=True)
    d.add_argument("--seeds", type=int, default=100)
    d.set_defaults(fn=cmd_dump_kernels)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DataError, GenerationError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
