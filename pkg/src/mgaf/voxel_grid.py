"""Point cloud quantization into a sparse voxel volume."""

from __future__ import annotations

import numpy as np

from .types import DenseBEVMap, MapGeometry, PointCloud, SparseVolume, VoxelGridSpec


def voxel_indices(xyz: np.ndarray, spec: VoxelGridSpec) -> np.ndarray:
    """Integer (ix, iy, iz) per point; callers must have range-cropped."""
    lo = np.asarray(spec.range_min, dtype=np.float64)
    d = np.asarray(spec.d, dtype=np.float64)
    idx = np.floor((xyz.astype(np.float64) - lo) / d).astype(np.int64)
    res = np.asarray(spec.resolution, dtype=np.int64)
    # guard the half-open upper edge against division roundoff
    return np.minimum(np.maximum(idx, 0), res - 1)


def voxelize(cloud: PointCloud, spec: VoxelGridSpec) -> SparseVolume:
    """Mean-of-points voxel features (x, y, z, r), C = 4.

    Active voxels come out sorted lexicographically by (ix, iy, iz).
    Accumulation runs in float64 in point order, then rounds to float32,
    so results are identical across reimplementations.
    """
    pts = cloud.points
    if len(cloud) and not spec.contains(pts[:, :3].astype(np.float64)).all():
        bad = int(np.nonzero(~spec.contains(pts[:, :3].astype(np.float64)))[0][0])
        raise ValueError(
            f"point {bad} at {pts[bad, :3].tolist()} lies outside the voxel range; crop first"
        )
    L, W, H = spec.resolution
    if len(cloud) == 0:
        return SparseVolume(np.zeros((0, 3), np.int32), np.zeros((0, 4), np.float32), (L, W, H))
    idx = voxel_indices(pts[:, :3], spec)
    keys = (idx[:, 0] * W + idx[:, 1]) * H + idx[:, 2]
    uniq, inverse = np.unique(keys, return_inverse=True)
    n = uniq.shape[0]
    acc = np.zeros((n, 4), dtype=np.float64)
    np.add.at(acc, inverse, pts.astype(np.float64))
    counts = np.bincount(inverse, minlength=n).astype(np.float64)
    feats = (acc / counts[:, None]).astype(np.float32)
    coords = np.stack([uniq // (W * H), (uniq // H) % W, uniq % H], axis=1).astype(np.int32)
    return SparseVolume(coords, feats, (L, W, H))


def occupancy_bev(vol: SparseVolume, geom: MapGeometry | None = None) -> DenseBEVMap:
    """1-channel occupancy: cell is 1 where any height bin is active."""
    L, W, _ = vol.spatial_shape
    grid = np.zeros((1, L, W), dtype=np.float32)
    if vol.num_active:
        grid[0, vol.coords[:, 0], vol.coords[:, 1]] = 1.0
    if geom is None:
        geom = MapGeometry(shape=(L, W), x_min=0.0, y_min=0.0, cell_x=1.0, cell_y=1.0, stride=1)
    return DenseBEVMap(grid, geom)


def dump_debug(vol: SparseVolume) -> str:
    """One active voxel per line: `ix iy iz f0 f1 ...` (floats as %.9g,
    which round-trips float32)."""
    lines = []
    for (ix, iy, iz), f in zip(vol.coords, vol.feats):
        vals = " ".join(f"{float(v):.9g}" for v in f)
        lines.append(f"{int(ix)} {int(iy)} {int(iz)} {vals}")
    return "\n".join(lines) + ("\n" if lines else "")
