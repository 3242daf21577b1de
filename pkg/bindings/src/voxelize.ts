import { GridSpec } from "./types.js";

export interface SparseVolume {
  coords: Int32Array; // (n, 3) row-major, sorted lexicographically
  feats: Float32Array; // (n, 4) mean (x, y, z, r)
  numActive: number;
}

/**
 * Quantize a range-cropped (n, 4) float32 cloud into mean-feature voxels.
 * Accumulation runs in float64 in point order and divides once, matching
 * the reference bit-for-bit.
 */
export function voxelize(points: Float32Array, spec: GridSpec): SparseVolume {
  const n = points.length / 4;
  const [L, W, H] = spec.resolution;
  const lo = spec.rangeMin;
  const hi = spec.rangeMax;
  const d = spec.voxelSize;

  const keys = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    const idx = [0, 0, 0];
    for (let a = 0; a < 3; a++) {
      const c = points[i * 4 + a];
      if (!(c >= lo[a] && c < hi[a])) {
        throw new Error(`point ${i} lies outside the voxel range; crop first`);
      }
      let v = Math.floor((c - lo[a]) / d[a]);
      const res = spec.resolution[a];
      if (v < 0) v = 0;
      if (v > res - 1) v = res - 1;
      idx[a] = v;
    }
    keys[i] = (idx[0] * W + idx[1]) * H + idx[2];
  }

  const uniq = Array.from(new Set(keys)).sort((a, b) => a - b);
  const keyToSlot = new Map<number, number>();
  uniq.forEach((k, slot) => keyToSlot.set(k, slot));

  const m = uniq.length;
  const acc = new Float64Array(m * 4);
  const counts = new Float64Array(m);
  for (let i = 0; i < n; i++) {
    const slot = keyToSlot.get(keys[i])!;
    for (let c = 0; c < 4; c++) acc[slot * 4 + c] += points[i * 4 + c];
    counts[slot] += 1;
  }

  const coords = new Int32Array(m * 3);
  const feats = new Float32Array(m * 4);
  for (let s = 0; s < m; s++) {
    const k = uniq[s];
    coords[s * 3] = Math.floor(k / (W * H));
    coords[s * 3 + 1] = Math.floor(k / H) % W;
    coords[s * 3 + 2] = k % H;
    for (let c = 0; c < 4; c++) feats[s * 4 + c] = Math.fround(acc[s * 4 + c] / counts[s]);
  }
  return { coords, feats, numActive: m };
}
