/** Shared value types crossing the binding boundary. */

export type Dtype = "f32" | "f64" | "i32" | "u8";

/** Contiguous numeric buffer with shape metadata. */
export interface BoundArray {
  data: Float32Array | Float64Array | Int32Array | Uint8Array;
  shape: number[];
  dtype: Dtype;
}

export interface GridSpec {
  rangeMin: [number, number, number];
  rangeMax: [number, number, number];
  voxelSize: [number, number, number];
  resolution: [number, number, number];
}

export interface MapGeometry {
  shape: [number, number];
  xMin: number;
  yMin: number;
  cellX: number;
  cellY: number;
  stride: number;
}

export interface Box3D {
  x: number;
  y: number;
  z: number;
  l: number;
  w: number;
  h: number;
  theta: number;
  classId: number;
}

export const TWO_PI = 2.0 * Math.PI;

/** Map an angle to [0, 2*pi) with the floor formula the reference uses. */
export function normalizeAngle(theta: number): number {
  let t = theta - TWO_PI * Math.floor(theta / TWO_PI);
  if (t >= TWO_PI) t -= TWO_PI;
  if (t < 0.0) t = 0.0;
  return t;
}

export function makeBox(
  x: number, y: number, z: number, l: number, w: number, h: number,
  theta: number, classId = 0,
): Box3D {
  if (!(l > 0 && w > 0 && h > 0)) {
    throw new Error(`box dimensions must be positive, got l=${l} w=${w} h=${h}`);
  }
  return { x, y, z, l, w, h, theta: normalizeAngle(theta), classId };
}

export function boxesFromArray(rows: Float32Array, classes?: Int32Array): Box3D[] {
  const out: Box3D[] = [];
  for (let i = 0; i * 7 < rows.length; i++) {
    const o = i * 7;
    out.push(
      makeBox(rows[o], rows[o + 1], rows[o + 2], rows[o + 3], rows[o + 4], rows[o + 5],
              rows[o + 6], classes ? classes[i] : 0),
    );
  }
  return out;
}
