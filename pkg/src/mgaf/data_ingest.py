"""KITTI-format IO, range cropping, augmentation and synthetic scenes.

Camera/LiDAR convention (identity calibration): the label location
(x_c, y_c, z_c) in the camera frame maps to LiDAR as
x_l = z_c, y_l = -x_c, z_l = -y_c, and yaw theta = -(ry + pi/2) mod 2pi.
Labels store the box bottom center, so z_l is lifted by h/2 on read and
lowered on write.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .iou_conf import RotatedRect, iou_bev
from .types import (
    Box3D,
    DataError,
    GenerationError,
    PointCloud,
    Scene,
    VoxelGridSpec,
    normalize_angle,
)

DEFAULT_CLASSES = ("Car", "Pedestrian", "Cyclist")

_PERM_CAM_TO_LIDAR = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class CalibTransform:
    """Rigid camera-to-LiDAR transform: p_lidar = R @ p_cam + t."""

    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity_permutation(cls) -> "CalibTransform":
        return cls(_PERM_CAM_TO_LIDAR.copy(), np.zeros(3))

    def apply(self, p: np.ndarray) -> np.ndarray:
        return p @ self.R.T + self.t


def read_velodyne_bin(path: str | Path) -> PointCloud:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read point cloud {path}: {e}") from e
    if len(raw) % 16 != 0:
        raise DataError(
            f"{path}: length {len(raw)} is not a multiple of 16 bytes; "
            f"trailing record starts at byte offset {len(raw) - len(raw) % 16}"
        )
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(pts.copy())


def _parse_label_line(line: str, lineno: int, path, classes, calib: CalibTransform,
                      with_score: bool):
    fields = line.split()
    expected = 16 if with_score else 15
    if len(fields) < expected:
        raise DataError(f"{path}:{lineno}: expected {expected} fields, got {len(fields)}")
    name = fields[0]
    if name == "DontCare":
        return None
    try:
        vals = [float(v) for v in fields[1:expected]]
    except ValueError as e:
        raise DataError(f"{path}:{lineno}: non-numeric field: {e}") from e
    h, w, l = vals[7], vals[8], vals[9]
    loc_cam = np.array(vals[10:13])
    ry = vals[13]
    if name not in classes:
        return None
    if min(h, w, l) <= 0:
        raise DataError(f"{path}:{lineno}: non-positive box dimensions")
    loc = calib.apply(loc_cam)
    box = Box3D(
        x=float(loc[0]),
        y=float(loc[1]),
        z=float(loc[2]) + 0.5 * h,
        l=l,
        w=w,
        h=h,
        theta=normalize_angle(-(ry + 0.5 * math.pi)),
        class_id=classes.index(name),
    )
    score = vals[14] if with_score else None
    return box, score, vals[:7]


def read_kitti_labels(path: str | Path, classes=DEFAULT_CLASSES,
                      calib: CalibTransform | None = None,
                      with_score: bool = False):
    """Parse a KITTI label/result file. Returns a list of
    (Box3D, score_or_None, meta) where meta holds the first 7 numeric fields
    (truncation, occlusion, alpha, 2D bbox) for difficulty stratification."""
    path = Path(path)
    calib = calib or CalibTransform.identity_permutation()
    try:
        text = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read labels {path}: {e}") from e
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parsed = _parse_label_line(line, lineno, path, classes, calib, with_score)
        if parsed is not None:
            rows.append(parsed)
    return rows


def read_kitti_scene(bin_path: str | Path, label_path: str | Path,
                     calib: CalibTransform | None = None,
                     classes=DEFAULT_CLASSES) -> Scene:
    cloud = read_velodyne_bin(bin_path)
    boxes = [row[0] for row in read_kitti_labels(label_path, classes, calib)]
    return Scene(cloud=cloud, gt_boxes=boxes, frame_id=Path(bin_path).stem)


def box_to_kitti_fields(box: Box3D, classes=DEFAULT_CLASSES) -> tuple[str, float, float, float, float]:
    """Inverse of the ingestion mapping: (name, h_w_l..., cam location, ry)."""
    name = classes[box.class_id]
    bottom = np.array([box.x, box.y, box.z - 0.5 * box.h])
    cam = _PERM_CAM_TO_LIDAR.T @ bottom
    ry = -(box.theta + 0.5 * math.pi)
    while ry < -math.pi:
        ry += 2.0 * math.pi
    while ry > math.pi:
        ry -= 2.0 * math.pi
    return name, cam, ry


def write_kitti_label_file(path: str | Path, boxes: list[Box3D],
                           scores: list[float] | None = None,
                           classes=DEFAULT_CLASSES) -> None:
    lines = []
    for i, box in enumerate(boxes):
        name, cam, ry = box_to_kitti_fields(box, classes)
        base = (
            f"{name} 0 0 -10 -1 -1 -1 -1 "
            f"{box.h:.6f} {box.w:.6f} {box.l:.6f} "
            f"{cam[0]:.6f} {cam[1]:.6f} {cam[2]:.6f} {ry:.6f}"
        )
        if scores is not None:
            base += f" {scores[i]:.6f}"
        lines.append(base)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_scene(out_dir: str | Path, scene: Scene, classes=DEFAULT_CLASSES) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{scene.frame_id}.bin").write_bytes(
        np.ascontiguousarray(scene.cloud.points, dtype="<f4").tobytes()
    )
    write_kitti_label_file(out_dir / f"{scene.frame_id}.txt", scene.gt_boxes, classes=classes)


def load_split(split_dir: str | Path, classes=DEFAULT_CLASSES) -> list[Scene]:
    split_dir = Path(split_dir)
    scenes = []
    for bin_path in sorted(split_dir.glob("*.bin")):
        label = bin_path.with_suffix(".txt")
        if not label.exists():
            raise DataError(f"missing label file for {bin_path}")
        scenes.append(read_kitti_scene(bin_path, label, classes=classes))
    return scenes


# ---------------------------------------------------------------------------
# geometry helpers


def points_in_box(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points inside the oriented box (boundaries inclusive)."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx = xyz[:, 0] - box.x
    dy = xyz[:, 1] - box.y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    dz = xyz[:, 2] - box.z
    return (
        (np.abs(u) <= 0.5 * box.l)
        & (np.abs(v) <= 0.5 * box.w)
        & (np.abs(dz) <= 0.5 * box.h)
    )


def crop_to_range(scene: Scene, spec: VoxelGridSpec) -> Scene:
    pts = scene.cloud.points
    if len(scene.cloud):
        keep = spec.contains(pts[:, :3].astype(np.float64))
        pts = pts[keep]
    boxes = [
        b
        for b in scene.gt_boxes
        if spec.contains(np.array([[b.x, b.y, b.z]], dtype=np.float64))[0]
    ]
    return Scene(cloud=PointCloud(pts.copy()), gt_boxes=boxes, frame_id=scene.frame_id)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class GtEntry:
    box: Box3D
    points_local: np.ndarray  # (n, 4): xyz in box frame + reflectance


@dataclass
class GtDatabase:
    entries: dict[int, list[GtEntry]] = field(default_factory=dict)

    def add(self, entry: GtEntry) -> None:
        self.entries.setdefault(entry.box.class_id, []).append(entry)

    def classes(self):
        return sorted(self.entries)


def build_gt_database(scenes: list[Scene]) -> GtDatabase:
    """Collect every ground-truth box with at least one interior point."""
    db = GtDatabase()
    for scene in scenes:
        xyz = scene.cloud.xyz
        for box in scene.gt_boxes:
            mask = points_in_box(xyz, box) if len(scene.cloud) else np.zeros(0, bool)
            if not mask.any():
                continue
            pts = scene.cloud.points[mask].astype(np.float64)
            c, s = math.cos(box.theta), math.sin(box.theta)
            dx, dy = pts[:, 0] - box.x, pts[:, 1] - box.y
            local = pts.copy()
            local[:, 0] = c * dx + s * dy
            local[:, 1] = -s * dx + c * dy
            local[:, 2] = pts[:, 2] - box.z
            db.add(GtEntry(box=box, points_local=local.astype(np.float32)))
    return db


@dataclass(frozen=True)
class AugmentConfig:
    gt_sampling: bool = True
    max_paste: int = 8
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.95, 1.05)
    rot_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)


def _entry_points_global(entry: GtEntry) -> np.ndarray:
    box = entry.box
    c, s = math.cos(box.theta), math.sin(box.theta)
    local = entry.points_local.astype(np.float64)
    out = local.copy()
    out[:, 0] = c * local[:, 0] - s * local[:, 1] + box.x
    out[:, 1] = s * local[:, 0] + c * local[:, 1] + box.y
    out[:, 2] = local[:, 2] + box.z
    return out


def _bev_overlaps_any(box: Box3D, others: list[Box3D]) -> bool:
    r = RotatedRect(box.x, box.y, box.l, box.w, box.theta)
    for o in others:
        if iou_bev(r, RotatedRect(o.x, o.y, o.l, o.w, o.theta)) > 0.0:
            return True
    return False


def augment(scene: Scene, db: GtDatabase | None, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> Scene:
    """Ground-truth sampling, then flip / global scale / global rotation.

    Pure in its inputs; all randomness comes from the supplied generator.
    """
    pts = scene.cloud.points.astype(np.float64)
    boxes = list(scene.gt_boxes)

    if cfg.gt_sampling and db is not None:
        extra_pts = []
        for class_id in db.classes():
            pool = db.entries[class_id]
            take = min(cfg.max_paste, len(pool))
            order = rng.permutation(len(pool))[:take]
            for k in order:
                entry = pool[int(k)]
                if _bev_overlaps_any(entry.box, boxes):
                    continue
                boxes.append(entry.box)
                extra_pts.append(_entry_points_global(entry))
        if extra_pts:
            pts = np.concatenate([pts] + extra_pts, axis=0)

    if rng.uniform() < cfg.flip_prob:
        pts[:, 1] = -pts[:, 1]
        boxes = [
            b.with_pose(b.x, -b.y, b.z, normalize_angle(2.0 * math.pi - b.theta)) for b in boxes
        ]

    s = rng.uniform(*cfg.scale_range)
    pts[:, :3] *= s
    boxes = [
        replace(b, x=b.x * s, y=b.y * s, z=b.z * s, l=b.l * s, w=b.w * s, h=b.h * s)
        for b in boxes
    ]

    phi = rng.uniform(*cfg.rot_range)
    c, sn = math.cos(phi), math.sin(phi)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - sn * y
    pts[:, 1] = sn * x + c * y
    boxes = [
        b.with_pose(c * b.x - sn * b.y, sn * b.x + c * b.y, b.z, b.theta + phi) for b in boxes
    ]

    return Scene(cloud=PointCloud(pts.astype(np.float32)), gt_boxes=boxes, frame_id=scene.frame_id)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthClassSpec:
    name: str
    class_id: int
    l_range: tuple[float, float]
    w_range: tuple[float, float]
    h_range: tuple[float, float]


@dataclass(frozen=True)
class SynthConfig:
    x_range: tuple[float, float] = (2.0, 12.0)
    y_range: tuple[float, float] = (-5.5, 5.5)
    ground_z: float = -1.0
    n_objects: tuple[int, int] = (1, 3)
    classes: tuple[SynthClassSpec, ...] = (
        SynthClassSpec("Car", 0, (3.6, 4.6), (1.6, 2.0), (1.4, 1.8)),
    )
    points_base: int = 240
    min_points: int = 24
    clutter_points: int = 40
    jitter: float = 0.02
    max_retries: int = 60


def _sample_face_points(box: Box3D, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Points on the two side faces nearest the sensor at the origin.

    The nearer face receives a larger share of the returns and the +length
    face is denser than the -length face, mimicking real sweeps. Without a
    front/back asymmetry the cloud is exactly pi-symmetric and orientation
    direction is unlearnable."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    u_axis = np.array([c, s])  # length direction
    v_axis = np.array([-s, c])  # width direction
    center = np.array([box.x, box.y])
    faces = [
        (center + 0.5 * box.l * u_axis, v_axis, box.w, 1.35),
        (center - 0.5 * box.l * u_axis, v_axis, box.w, 0.65),
        (center + 0.5 * box.w * v_axis, u_axis, box.l, 1.0),
        (center - 0.5 * box.w * v_axis, u_axis, box.l, 1.0),
    ]
    faces.sort(key=lambda f: float(np.hypot(f[0][0], f[0][1])))
    dist = math.hypot(box.x, box.y)
    total = max(cfg.min_points, int(cfg.points_base / max(1.0, dist)))
    shares = (0.65, 0.35)
    pts = []
    for (face_center, along, extent, density), share in zip(faces[:2], shares):
        n = max(4, int(round(total * share * density)))
        a = rng.uniform(-0.5 * extent, 0.5 * extent, size=n)
        zz = rng.uniform(box.z - 0.5 * box.h, box.z + 0.5 * box.h, size=n)
        xy = face_center[None, :] + a[:, None] * along[None, :]
        block = np.column_stack([xy[:, 0], xy[:, 1], zz, rng.uniform(0.05, 0.95, size=n)])
        block[:, :3] += rng.normal(0.0, cfg.jitter, size=(n, 3))
        pts.append(block)
    return np.concatenate(pts, axis=0)


def synth_scene(rng: np.random.Generator, cfg: SynthConfig = SynthConfig(),
                frame_id: str = "000000") -> Scene:
    """Deterministic synthetic LiDAR scene: boxes with surface-only points
    (empty interiors, like a real sweep) plus sparse ground clutter."""
    n_target = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    boxes: list[Box3D] = []
    for _ in range(n_target):
        placed = False
        for _ in range(cfg.max_retries):
            cls = cfg.classes[int(rng.integers(0, len(cfg.classes)))]
            l = rng.uniform(*cls.l_range)
            w = rng.uniform(*cls.w_range)
            h = rng.uniform(*cls.h_range)
            x = rng.uniform(*cfg.x_range)
            y = rng.uniform(*cfg.y_range)
            theta = rng.uniform(0.0, 2.0 * math.pi)
            cand = Box3D(x, y, cfg.ground_z + 0.5 * h, l, w, h, theta, cls.class_id)
            if not _bev_overlaps_any(cand, boxes):
                boxes.append(cand)
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place {n_target} non-overlapping boxes after {cfg.max_retries} retries"
            )

    blocks = [_sample_face_points(b, rng, cfg) for b in boxes]
    if cfg.clutter_points:
        n = cfg.clutter_points
        clutter = np.column_stack(
            [
                rng.uniform(*cfg.x_range, size=n),
                rng.uniform(*cfg.y_range, size=n),
                cfg.ground_z + np.abs(rng.normal(0.0, 0.04, size=n)),
                rng.uniform(0.05, 0.95, size=n),
            ]
        )
        blocks.append(clutter)
    pts = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, 4))
    return Scene(cloud=PointCloud(pts.astype(np.float32)), gt_boxes=boxes, frame_id=frame_id)
