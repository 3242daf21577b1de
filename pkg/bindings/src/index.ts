export const VERSION = "0.1.0";

export { detExp, detSin, detCos } from "./detmath.js";
export {
  BoundArray, Box3D, GridSpec, MapGeometry, TWO_PI,
  boxesFromArray, makeBox, normalizeAngle,
} from "./types.js";
export { SparseVolume, voxelize } from "./voxelize.js";
export { RotatedRect, bevRect, intersectionAreaBev, iouBev, iou3d } from "./iou.js";
export {
  RotBinCodec, TargetBundle, binWidth, buildTargets, decodeRot, encodeRot,
  gaussianRadius, maskTarget,
} from "./targets.js";
export { Peak, extractPeaks } from "./peaks.js";
export { Detection, HeadMaps, decode } from "./decode.js";
