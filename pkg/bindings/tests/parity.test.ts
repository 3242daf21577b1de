/**
 * Cross-implementation parity: regenerate every kernel output from the
 * dumped inputs and require byte-identical float32 results against the
 * reference CLI dumps, across all seeds.
 */

import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { beforeAll, describe, expect, test } from "vitest";

import {
  GridSpec, MapGeometry, VERSION, boxesFromArray, buildTargets, decode,
  extractPeaks, iou3d, iouBev, bevRect, voxelize,
} from "../src/index.js";

const N_SEEDS = 100;

let dumpDir: string;
let manifest: any;
let spec: GridSpec;
let geom: MapGeometry;

function readF32(p: string): Float32Array {
  const buf = fs.readFileSync(p);
  return new Float32Array(buf.buffer, buf.byteOffset, buf.byteLength / 4);
}

function readI32(p: string): Int32Array {
  const buf = fs.readFileSync(p);
  return new Int32Array(buf.buffer, buf.byteOffset, buf.byteLength / 4);
}

function readU8(p: string): Uint8Array {
  return new Uint8Array(fs.readFileSync(p));
}

function expectBytesEqual(got: ArrayBufferView, wantPath: string, label: string) {
  const want = fs.readFileSync(wantPath);
  const gotBuf = Buffer.from(got.buffer as ArrayBuffer, got.byteOffset, got.byteLength);
  if (!gotBuf.equals(want)) {
    let firstDiff = -1;
    for (let i = 0; i < Math.min(gotBuf.length, want.length); i++) {
      if (gotBuf[i] !== want[i]) {
        firstDiff = i;
        break;
      }
    }
    throw new Error(
      `${label}: ${gotBuf.length} vs ${want.length} bytes, first difference at byte ${firstDiff}`,
    );
  }
  expect(gotBuf.length).toBe(want.length);
}

beforeAll(() => {
  dumpDir = path.join(os.tmpdir(), "mgaf-kernel-dumps");
  const manifestPath = path.join(dumpDir, "manifest.json");
  let regenerate = true;
  if (fs.existsSync(manifestPath)) {
    const m = JSON.parse(fs.readFileSync(manifestPath, "utf-8"));
    regenerate = m.seeds !== N_SEEDS || m.version !== VERSION;
  }
  if (regenerate) {
    fs.rmSync(dumpDir, { recursive: true, force: true });
    execFileSync("mgaf", ["dump-kernels", "--out", dumpDir, "--seeds", String(N_SEEDS)], {
      stdio: "inherit",
    });
  }
  manifest = JSON.parse(fs.readFileSync(manifestPath, "utf-8"));
  spec = {
    rangeMin: manifest.grid.range_min,
    rangeMax: manifest.grid.range_max,
    voxelSize: manifest.grid.voxel_size,
    resolution: manifest.grid.resolution,
  };
  geom = {
    shape: manifest.map.shape,
    xMin: manifest.map.x_min,
    yMin: manifest.map.y_min,
    cellX: manifest.map.cell_x,
    cellY: manifest.map.cell_y,
    stride: manifest.map.stride,
  };
}, 300_000);

describe("binding parity against reference dumps", () => {
  test("version string matches the reference build", () => {
    expect(manifest.version).toBe(VERSION);
  });

  test(`all ${N_SEEDS} seeds byte-identical`, () => {
    for (let seed = 0; seed < N_SEEDS; seed++) {
      const d = path.join(dumpDir, `seed_${String(seed).padStart(3, "0")}`);

      // voxelize
      const cloud = readF32(path.join(d, "cloud.f32"));
      const vol = voxelize(cloud, spec);
      expectBytesEqual(vol.coords, path.join(d, "voxel_coords.i32"), `seed ${seed} coords`);
      expectBytesEqual(vol.feats, path.join(d, "voxel_feats.f32"), `seed ${seed} feats`);

      // rotated IoU
      const boxesA = boxesFromArray(readF32(path.join(d, "boxes_a.f32")));
      const boxesB = boxesFromArray(readF32(path.join(d, "boxes_b.f32")));
      const bev = new Float32Array(boxesA.length);
      const full = new Float32Array(boxesA.length);
      for (let i = 0; i < boxesA.length; i++) {
        bev[i] = Math.fround(iouBev(bevRect(boxesA[i]), bevRect(boxesB[i])));
        full[i] = Math.fround(iou3d(boxesA[i], boxesB[i]));
      }
      expectBytesEqual(bev, path.join(d, "iou_bev.f32"), `seed ${seed} iou_bev`);
      expectBytesEqual(full, path.join(d, "iou_3d.f32"), `seed ${seed} iou_3d`);

      // build_targets
      const gt = boxesFromArray(
        readF32(path.join(d, "gt_boxes.f32")), readI32(path.join(d, "gt_classes.i32")),
      );
      const t = buildTargets(gt, manifest.num_classes, geom, { b: manifest.rot_bins });
      expectBytesEqual(t.heatmap, path.join(d, "t_heatmap.f32"), `seed ${seed} t_heatmap`);
      expectBytesEqual(t.offset, path.join(d, "t_offset.f32"), `seed ${seed} t_offset`);
      expectBytesEqual(t.zmap, path.join(d, "t_z.f32"), `seed ${seed} t_z`);
      expectBytesEqual(t.sizemap, path.join(d, "t_size.f32"), `seed ${seed} t_size`);
      expectBytesEqual(t.rotBin, path.join(d, "t_rot_bin.i32"), `seed ${seed} t_rot_bin`);
      expectBytesEqual(t.rotRes, path.join(d, "t_rot_res.f32"), `seed ${seed} t_rot_res`);
      expectBytesEqual(t.centerMask, path.join(d, "t_center_mask.u8"), `seed ${seed} t_center_mask`);
      expectBytesEqual(t.centerClass, path.join(d, "t_center_class.i32"), `seed ${seed} t_center_class`);
      expectBytesEqual(t.maskTarget, path.join(d, "t_mask.f32"), `seed ${seed} t_mask`);
      const nArr = new Int32Array([t.nObjects]);
      expectBytesEqual(nArr, path.join(d, "t_n.i32"), `seed ${seed} t_n`);

      // extract_peaks
      const heatmap = readF32(path.join(d, "heatmap.f32"));
      const peaks = extractPeaks(
        heatmap, manifest.num_classes, geom.shape[0], geom.shape[1],
        manifest.top_k, manifest.mu_cls,
      );
      const peakIdx = new Int32Array(peaks.length * 3);
      const peakScores = new Float32Array(peaks.length);
      peaks.forEach((p, i) => {
        peakIdx[i * 3] = p.classId;
        peakIdx[i * 3 + 1] = p.u;
        peakIdx[i * 3 + 2] = p.v;
        peakScores[i] = p.score;
      });
      expectBytesEqual(peakIdx, path.join(d, "peaks.i32"), `seed ${seed} peaks`);
      expectBytesEqual(peakScores, path.join(d, "peak_scores.f32"), `seed ${seed} peak_scores`);

      // decode
      const maps = {
        offset: readF32(path.join(d, "m_offset.f32")),
        z: readF32(path.join(d, "m_z.f32")),
        size: readF32(path.join(d, "m_size.f32")),
        rotBin: readF32(path.join(d, "m_rot_bin.f32")),
        rotRes: readF32(path.join(d, "m_rot_res.f32")),
        iou: readF32(path.join(d, "m_iou.f32")),
      };
      const dets = decode(peaks, maps, geom, { b: manifest.rot_bins }, true);
      const detArr = new Float32Array(dets.length * 10);
      const detCls = new Int32Array(dets.length);
      const detClamped = new Uint8Array(dets.length);
      dets.forEach((det, i) => {
        const row = [det.box.x, det.box.y, det.box.z, det.box.l, det.box.w, det.box.h,
                     det.box.theta, det.clsScore, det.iouConf, det.finalScore];
        row.forEach((v, j) => (detArr[i * 10 + j] = Math.fround(v)));
        detCls[i] = det.classId;
        detClamped[i] = det.sizeClamped ? 1 : 0;
      });
      expectBytesEqual(detArr, path.join(d, "dets.f32"), `seed ${seed} dets`);
      expectBytesEqual(detCls, path.join(d, "dets_class.i32"), `seed ${seed} dets_class`);
      expectBytesEqual(detClamped, path.join(d, "dets_clamped.u8"), `seed ${seed} dets_clamped`);
    }
  }, 300_000);
});
