import { Peak } from "./peaks.js";
import { RotBinCodec, decodeRot } from "./targets.js";
import { Box3D, MapGeometry, makeBox } from "./types.js";

export interface HeadMaps {
  offset: Float32Array; // (2, L, W)
  z: Float32Array; // (1, L, W)
  size: Float32Array; // (3, L, W)
  rotBin: Float32Array; // (b, L, W)
  rotRes: Float32Array; // (b, L, W)
  iou?: Float32Array; // (1, L, W) logistic-activated
}

export interface Detection {
  box: Box3D;
  classId: number;
  clsScore: number;
  iouConf: number;
  finalScore: number;
  pixel: [number, number];
  sizeClamped: boolean;
}

export function decode(peaks: Peak[], maps: HeadMaps, geom: MapGeometry,
                       codec: RotBinCodec, recalibrated = true): Detection[] {
  const [L, W] = geom.shape;
  const cells = L * W;
  const out: Detection[] = [];
  for (const p of peaks) {
    const pix = p.u * W + p.v;
    const x = (p.u + maps.offset[pix]) * geom.cellX + geom.xMin;
    const y = (p.v + maps.offset[cells + pix]) * geom.cellY + geom.yMin;
    const z = maps.z[pix];
    let l = maps.size[pix];
    let w = maps.size[cells + pix];
    let h = maps.size[2 * cells + pix];
    let clamped = false;
    if (l <= 0 || w <= 0 || h <= 0) {
      l = Math.max(l, 0.01);
      w = Math.max(w, 0.01);
      h = Math.max(h, 0.01);
      clamped = true;
    }
    let binIdx = 0;
    let best = maps.rotBin[pix];
    for (let b = 1; b < codec.b; b++) {
      const v = maps.rotBin[b * cells + pix];
      if (v > best) {
        best = v;
        binIdx = b;
      }
    }
    const theta = decodeRot(codec, binIdx, maps.rotRes[binIdx * cells + pix]);
    const iouConf = maps.iou ? maps.iou[pix] : 0.0;
    const final = recalibrated && maps.iou ? iouConf : p.score;
    out.push({
      box: makeBox(x, y, z, l, w, h, theta, p.classId),
      classId: p.classId,
      clsScore: p.score,
      iouConf,
      finalScore: final,
      pixel: [p.u, p.v],
      sizeClamped: clamped,
    });
  }
  return out;
}
