import { detCos, detExp, detSin } from "./detmath.js";
import { Box3D, MapGeometry, TWO_PI } from "./types.js";

export interface RotBinCodec {
  b: number;
}

export function binWidth(codec: RotBinCodec): number {
  return TWO_PI / codec.b;
}

export function encodeRot(codec: RotBinCodec, theta: number): [number, number] {
  const d = binWidth(codec);
  let bin = Math.floor(theta / d);
  if (bin >= codec.b) bin = codec.b - 1;
  const res = (theta - (bin + 0.5) * d) / (0.5 * d);
  return [bin, res];
}

export function decodeRot(codec: RotBinCodec, bin: number, res: number): number {
  const d = binWidth(codec);
  let t = (bin + 0.5 + 0.5 * res) * d;
  t -= TWO_PI * Math.floor(t / TWO_PI);
  return t < TWO_PI ? t : 0.0;
}

export function gaussianRadius(footprintL: number, footprintW: number,
                               minOverlap = 0.7): number {
  const h = footprintL;
  const w = footprintW;
  const b1 = h + w;
  const c1 = (w * h * (1.0 - minOverlap)) / (1.0 + minOverlap);
  const sq1 = Math.sqrt(b1 * b1 - 4.0 * 1.0 * c1);
  const r1 = (b1 + sq1) / 2.0;

  const b2 = 2.0 * (h + w);
  const c2 = (1.0 - minOverlap) * w * h;
  const sq2 = Math.sqrt(b2 * b2 - 4.0 * 4.0 * c2);
  const r2 = (b2 + sq2) / 2.0;

  const b3 = -2.0 * minOverlap * (h + w);
  const c3 = (minOverlap - 1.0) * w * h;
  const sq3 = Math.sqrt(b3 * b3 - 4.0 * (4.0 * minOverlap) * c3);
  const r3 = (b3 + sq3) / 2.0;
  return Math.min(r1, Math.min(r2, r3));
}

export interface TargetBundle {
  heatmap: Float32Array; // (K, L, W)
  offset: Float32Array; // (2, L, W)
  zmap: Float32Array; // (1, L, W)
  sizemap: Float32Array; // (3, L, W)
  rotBin: Int32Array; // (L, W)
  rotRes: Float32Array; // (L, W)
  centerMask: Uint8Array; // (L, W)
  centerClass: Int32Array; // (L, W)
  nObjects: number;
  maskTarget: Float32Array; // (1, L, W)
}

/** Class-agnostic BEV footprint mask, half-open in the box frame. */
export function maskTarget(boxes: Box3D[], geom: MapGeometry): Float32Array {
  const [L, W] = geom.shape;
  const out = new Float32Array(L * W);
  for (const box of boxes) {
    const c = detCos(box.theta);
    const s = detSin(box.theta);
    for (let ui = 0; ui < L; ui++) {
      const dx = geom.xMin + (ui + 0.5) * geom.cellX - box.x;
      for (let vi = 0; vi < W; vi++) {
        const dy = geom.yMin + (vi + 0.5) * geom.cellY - box.y;
        const u = c * dx + s * dy;
        const v = -s * dx + c * dy;
        if (u >= -0.5 * box.l && u < 0.5 * box.l && v >= -0.5 * box.w && v < 0.5 * box.w) {
          const val = 1.0;
          if (val > out[ui * W + vi]) out[ui * W + vi] = val;
        }
      }
    }
  }
  return out;
}

export function buildTargets(boxes: Box3D[], numClasses: number, geom: MapGeometry,
                             codec: RotBinCodec): TargetBundle {
  const [L, W] = geom.shape;
  const heatmap = new Float32Array(numClasses * L * W);
  const offset = new Float32Array(2 * L * W);
  const zmap = new Float32Array(L * W);
  const sizemap = new Float32Array(3 * L * W);
  const rotBin = new Int32Array(L * W);
  const rotRes = new Float32Array(L * W);
  const centerMask = new Uint8Array(L * W);
  const centerClass = new Int32Array(L * W);
  const bestArea = new Float64Array(L * W);

  for (const box of boxes) {
    if (!(box.classId >= 0 && box.classId < numClasses)) {
      throw new Error(`class_id ${box.classId} outside [0, ${numClasses})`);
    }
    const px = (box.x - geom.xMin) / geom.cellX;
    const py = (box.y - geom.yMin) / geom.cellY;
    const u = Math.floor(px);
    const v = Math.floor(py);
    if (!(u >= 0 && u < L && v >= 0 && v < W)) continue;

    const r = Math.max(1.0, gaussianRadius(box.l / geom.cellX, box.w / geom.cellY));
    const sigma = r / 3.0;
    const wr = Math.ceil(r - 1e-9);
    const inv = 1.0 / (2.0 * sigma * sigma);
    for (let du = -wr; du <= wr; du++) {
      const uu = u + du;
      if (uu < 0 || uu >= L) continue;
      for (let dv = -wr; dv <= wr; dv++) {
        const vv = v + dv;
        if (vv < 0 || vv >= W) continue;
        const g = detExp(-(du * du + dv * dv) * inv);
        const at = box.classId * L * W + uu * W + vv;
        if (g > heatmap[at]) heatmap[at] = Math.fround(g);
      }
    }

    const pix = u * W + v;
    const area = box.l * box.w;
    if (centerMask[pix] && bestArea[pix] >= area) continue;
    centerMask[pix] = 1;
    centerClass[pix] = box.classId;
    bestArea[pix] = area;
    offset[pix] = Math.fround(px - u);
    offset[L * W + pix] = Math.fround(py - v);
    zmap[pix] = Math.fround(box.z);
    sizemap[pix] = Math.fround(box.l);
    sizemap[L * W + pix] = Math.fround(box.w);
    sizemap[2 * L * W + pix] = Math.fround(box.h);
    const [bin, res] = encodeRot(codec, box.theta);
    rotBin[pix] = bin;
    rotRes[pix] = Math.fround(res);
  }

  let n = 0;
  for (let i = 0; i < L * W; i++) n += centerMask[i];
  return {
    heatmap, offset, zmap, sizemap, rotBin, rotRes, centerMask, centerClass,
    nObjects: n, maskTarget: maskTarget(boxes, geom),
  };
}
