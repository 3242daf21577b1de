export interface Peak {
  classId: number;
  u: number;
  v: number;
  score: number;
}

const NEIGHBORS: Array<[number, number]> = [
  [-1, -1], [-1, 0], [-1, 1], [0, -1], [0, 1], [1, -1], [1, 0], [1, 1],
];

/**
 * 3x3 local maxima per channel with plateau dedup at the smallest row-major
 * pixel, pooled across classes, truncated to topK by score, then thresholded.
 */
export function extractPeaks(heatmap: Float32Array, K: number, L: number, W: number,
                             topK: number, muCls: number): Peak[] {
  const peaks: Peak[] = [];
  for (let k = 0; k < K; k++) {
    const base = k * L * W;
    for (let u = 0; u < L; u++) {
      for (let v = 0; v < W; v++) {
        const val = heatmap[base + u * W + v];
        let ok = true;
        for (const [du, dv] of NEIGHBORS) {
          const nu = u + du;
          const nv = v + dv;
          if (nu < 0 || nu >= L || nv < 0 || nv >= W) continue;
          const nval = heatmap[base + nu * W + nv];
          const earlier = du < 0 || (du === 0 && dv < 0);
          if (earlier ? !(val > nval) : !(val >= nval)) {
            ok = false;
            break;
          }
        }
        if (ok) peaks.push({ classId: k, u, v, score: val });
      }
    }
  }
  peaks.sort((a, b) => {
    if (a.score !== b.score) return b.score - a.score;
    if (a.classId !== b.classId) return a.classId - b.classId;
    if (a.u !== b.u) return a.u - b.u;
    return a.v - b.v;
  });
  return peaks.slice(0, topK).filter((p) => p.score >= muCls);
}
