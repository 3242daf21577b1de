import { detCos, detSin } from "./detmath.js";
import { Box3D } from "./types.js";

export interface RotatedRect {
  cx: number;
  cy: number;
  l: number;
  w: number;
  theta: number;
}

export function bevRect(b: Box3D): RotatedRect {
  return { cx: b.x, cy: b.y, l: b.l, w: b.w, theta: b.theta };
}

type Pt = [number, number];

function rectCorners(r: RotatedRect): Pt[] {
  const c = detCos(r.theta);
  const s = detSin(r.theta);
  const hl = 0.5 * r.l;
  const hw = 0.5 * r.w;
  const local: Pt[] = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
  return local.map(([px, py]) => [r.cx + c * px - s * py, r.cy + s * px + c * py]);
}

function clipPolygon(subject: Pt[], clip: Pt[]): Pt[] {
  let output = subject;
  const n = clip.length;
  for (let e = 0; e < n; e++) {
    const [ax, ay] = clip[e];
    const [bx, by] = clip[(e + 1) % n];
    const ex = bx - ax;
    const ey = by - ay;
    const inp = output;
    output = [];
    if (inp.length === 0) break;
    const m = inp.length;
    for (let i = 0; i < m; i++) {
      const [px, py] = inp[(i + m - 1) % m];
      const [cx, cy] = inp[i];
      const dp = ex * (py - ay) - ey * (px - ax);
      const dc = ex * (cy - ay) - ey * (cx - ax);
      const pIn = dp >= 0.0;
      const cIn = dc >= 0.0;
      if (cIn) {
        if (!pIn) {
          const t = dp / (dp - dc);
          output.push([px + t * (cx - px), py + t * (cy - py)]);
        }
        output.push([cx, cy]);
      } else if (pIn) {
        const t = dp / (dp - dc);
        output.push([px + t * (cx - px), py + t * (cy - py)]);
      }
    }
  }
  return output;
}

function polygonArea(poly: Pt[]): number {
  if (poly.length < 3) return 0.0;
  let acc = 0.0;
  const n = poly.length;
  for (let i = 0; i < n; i++) {
    const [x0, y0] = poly[i];
    const [x1, y1] = poly[(i + 1) % n];
    acc += x0 * y1 - x1 * y0;
  }
  const area = 0.5 * acc;
  return area > 0.0 ? area : 0.0;
}

function rectKey(r: RotatedRect): number[] {
  return [r.cx, r.cy, r.l, r.w, r.theta];
}

function lexLess(a: number[], b: number[]): boolean {
  for (let i = 0; i < a.length; i++) {
    if (a[i] < b[i]) return true;
    if (a[i] > b[i]) return false;
  }
  return false;
}

export function intersectionAreaBev(a: RotatedRect, b: RotatedRect): number {
  if (lexLess(rectKey(b), rectKey(a))) {
    const t = a;
    a = b;
    b = t;
  }
  return polygonArea(clipPolygon(rectCorners(a), rectCorners(b)));
}

export function iouBev(a: RotatedRect, b: RotatedRect): number {
  const inter = intersectionAreaBev(a, b);
  const union = a.l * a.w + b.l * b.w - inter;
  if (union <= 0.0) return 0.0;
  const iou = inter / union;
  return Math.min(1.0, Math.max(0.0, iou));
}

export function iou3d(a: Box3D, b: Box3D): number {
  const interArea = intersectionAreaBev(bevRect(a), bevRect(b));
  const zLo = Math.max(a.z - 0.5 * a.h, b.z - 0.5 * b.h);
  const zHi = Math.min(a.z + 0.5 * a.h, b.z + 0.5 * b.h);
  const dz = zHi - zLo;
  if (dz <= 0.0) return 0.0;
  const inter = interArea * dz;
  const volA = a.l * a.w * a.h;
  const volB = b.l * b.w * b.h;
  const union = volA + volB - inter;
  if (union <= 0.0) return 0.0;
  return Math.min(1.0, Math.max(0.0, inter / union));
}
