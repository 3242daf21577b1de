"""Shared domain types: boxes, point clouds, scenes, grids and maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi


class DataError(Exception):
    """Malformed or missing input data."""


class ConfigError(Exception):
    """Bad configuration key or value."""


class ShapeError(ValueError):
    """Tensor shape or channel mismatch."""


class GenerationError(Exception):
    """Synthetic scene generation could not satisfy its constraints."""


class TrainingError(RuntimeError):
    """Numerical failure during training (NaN loss, non-finite gradient)."""


def normalize_angle(theta: float) -> float:
    """Map an angle to [0, 2*pi). Uses floor() rather than %, so the result
    is identical in every IEEE-754 language."""
    t = theta - TWO_PI * math.floor(theta / TWO_PI)
    if t >= TWO_PI:
        t -= TWO_PI
    if t < 0.0:
        t = 0.0
    return t


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D bounding box; (x, y, z) is the geometric center."""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @property
    def bev_area(self) -> float:
        return self.l * self.w

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def with_pose(self, x: float, y: float, z: float, theta: float) -> "Box3D":
        return replace(self, x=x, y=y, z=z, theta=normalize_angle(theta))


@dataclass
class PointCloud:
    """Columns are (x, y, z, reflectance); float32, contiguous."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float32))
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ShapeError(f"point cloud must be (N, 4), got {pts.shape}")
        if pts.size and not np.isfinite(pts).all():
            raise DataError("point cloud contains non-finite values")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass
class Scene:
    cloud: PointCloud
    gt_boxes: list[Box3D]
    frame_id: str


@dataclass(frozen=True)
class VoxelGridSpec:
    """Regular voxel grid over a half-open metric range [min, max)."""

    range_min: tuple[float, float, float]
    range_max: tuple[float, float, float]
    d: tuple[float, float, float]

    def __post_init__(self):
        for i in range(3):
            if self.d[i] <= 0:
                raise ValueError(f"voxel size must be positive on axis {i}")
            extent = self.range_max[i] - self.range_min[i]
            n = round(extent / self.d[i])
            if n < 1 or abs(n * self.d[i] - extent) > 1e-6 * max(1.0, abs(extent)):
                raise ValueError(
                    f"range extent {extent} on axis {i} is not an integer multiple of d={self.d[i]}"
                )

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(
            int(round((self.range_max[i] - self.range_min[i]) / self.d[i])) for i in range(3)
        )  # type: ignore[return-value]

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Half-open membership test per point, vectorized."""
        lo = np.asarray(self.range_min, dtype=xyz.dtype)
        hi = np.asarray(self.range_max, dtype=xyz.dtype)
        return np.all((xyz >= lo) & (xyz < hi), axis=-1)


@dataclass
class SparseVolume:
    """Coordinate-list sparse feature volume. coords are (ix, iy, iz) int32,
    unique and sorted lexicographically; feats is (N, C) float."""

    coords: np.ndarray
    feats: np.ndarray
    spatial_shape: tuple[int, int, int]

    def __post_init__(self):
        self.coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int32).reshape(-1, 3))
        self.feats = np.ascontiguousarray(np.asarray(self.feats))
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise ShapeError(
                f"feats {self.feats.shape} does not match {self.coords.shape[0]} coords"
            )

    @property
    def num_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.feats.shape[1]


@dataclass(frozen=True)
class MapGeometry:
    """Metric geometry of a BEV map: pixel (u, v) covers
    [x_min + u*cell_x, x_min + (u+1)*cell_x) x [y_min + v*cell_y, ...)."""

    shape: tuple[int, int]
    x_min: float
    y_min: float
    cell_x: float
    cell_y: float
    stride: int

    @classmethod
    def from_grid(cls, spec: VoxelGridSpec, stride: int) -> "MapGeometry":
        L0, W0, _ = spec.resolution
        return cls(
            shape=(-(-L0 // stride), -(-W0 // stride)),
            x_min=spec.range_min[0],
            y_min=spec.range_min[1],
            cell_x=stride * spec.d[0],
            cell_y=stride * spec.d[1],
            stride=stride,
        )


@dataclass
class DenseBEVMap:
    """Dense (C, L, W) float32 grid plus its metric geometry."""

    data: np.ndarray
    geom: MapGeometry

    def __post_init__(self):
        self.data = np.ascontiguousarray(np.asarray(self.data))
        if self.data.ndim != 3:
            raise ShapeError(f"BEV map must be (C, L, W), got {self.data.shape}")
        if self.data.shape[1:] != tuple(self.geom.shape):
            raise ShapeError(f"map {self.data.shape[1:]} does not match geometry {self.geom.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class TargetBundle:
    """Per-scene supervision: heatmap is (K, L, W), offset (2, L, W),
    zmap (1, L, W), sizemap (3, L, W); rot_bin/rot_res/center_class are
    (L, W) and only meaningful where center_mask is set. center_boxes lists
    the boxes that own each center pixel, in row-major pixel order."""

    heatmap: np.ndarray
    offset: np.ndarray
    zmap: np.ndarray
    sizemap: np.ndarray
    rot_bin: np.ndarray
    rot_res: np.ndarray
    center_mask: np.ndarray
    center_class: np.ndarray
    n_objects: int
    mask_target: np.ndarray = field(default=None)  # type: ignore[assignment]
    center_boxes: list[Box3D] = field(default_factory=list)


@dataclass
class Detection:
    box: Box3D
    class_id: int
    cls_score: float
    iou_conf: float
    final_score: float
    pixel: tuple[int, int]
    size_clamped: bool = False
