/**
 * Deterministic elementary functions, mirroring the reference kernels.
 *
 * Every operation is a plain IEEE-754 double op in a fixed order, so results
 * are bit-identical to any other strict implementation of the same formulas.
 */

const LOG2E = 1.4426950408889634074;
const LN2_HI = 6.93147180369123816490e-1;
const LN2_LO = 1.90821492927058770002e-10;

const INV_PIO2 = 6.36619772367581382433e-1;
const PIO2_1 = 1.57079632673412561417e0;
const PIO2_1T = 6.07710050650619224932e-11;

// 1/k! for k = 14 .. 2 from exact integer division
const EXP_COEFFS: number[] = [];
{
  let fact = 1;
  const facts: number[] = [1];
  for (let k = 1; k <= 14; k++) {
    fact *= k;
    facts.push(fact);
  }
  for (let k = 14; k >= 2; k--) EXP_COEFFS.push(1.0 / facts[k]);
}

const SIN_COEFFS = [
  1.58969099521155010221e-10, -2.50507602534068634195e-8, 2.75573137070700676789e-6,
  -1.98412698298579493134e-4, 8.33333333332248946124e-3, -1.66666666666666324348e-1,
];

const COS_COEFFS = [
  -1.13596475577881948265e-11, 2.08757232129817482790e-9, -2.75573143513906633035e-7,
  2.48015872894767294178e-5, -1.38888888888741095749e-3, 4.16666666666666019037e-2,
];

const LDEXP_VIEW = new DataView(new ArrayBuffer(8));

/** value * 2^k, exact (k kept well clear of the subnormal range here). */
function ldexp(value: number, k: number): number {
  if (value === 0 || !isFinite(value)) return value;
  let e = k;
  let v = value;
  // build 2^e through the exponent bits; split huge shifts
  while (e > 1000) {
    v *= pow2(1000);
    e -= 1000;
  }
  while (e < -1000) {
    v *= pow2(-1000);
    e += 1000;
  }
  return v * pow2(e);
}

function pow2(e: number): number {
  LDEXP_VIEW.setBigUint64(0, BigInt(e + 1023) << 52n);
  return LDEXP_VIEW.getFloat64(0);
}

export function detExp(x: number): number {
  const k = Math.floor(x * LOG2E + 0.5);
  const r = (x - k * LN2_HI) - k * LN2_LO;
  let p = EXP_COEFFS[0];
  for (let i = 1; i < EXP_COEFFS.length; i++) p = p * r + EXP_COEFFS[i];
  p = p * r + 1.0;
  p = p * r + 1.0;
  return ldexp(p, k);
}

function kernelSin(r: number, r2: number): number {
  let p = SIN_COEFFS[0];
  for (let i = 1; i < SIN_COEFFS.length; i++) p = p * r2 + SIN_COEFFS[i];
  return r + r * r2 * p;
}

function kernelCos(r: number, r2: number): number {
  let p = COS_COEFFS[0];
  for (let i = 1; i < COS_COEFFS.length; i++) p = p * r2 + COS_COEFFS[i];
  return 1.0 - 0.5 * r2 + r2 * r2 * p;
}

function reduce(x: number): { r: number; q: number } {
  const n = Math.floor(x * INV_PIO2 + 0.5);
  const r = (x - n * PIO2_1) - n * PIO2_1T;
  const q = ((n % 4) + 4) % 4;
  return { r, q };
}

export function detSin(x: number): number {
  const { r, q } = reduce(x);
  const r2 = r * r;
  const s = kernelSin(r, r2);
  const c = kernelCos(r, r2);
  return q === 0 ? s : q === 1 ? c : q === 2 ? -s : -c;
}

export function detCos(x: number): number {
  const { r, q } = reduce(x);
  const r2 = r * r;
  const s = kernelSin(r, r2);
  const c = kernelCos(r, r2);
  return q === 0 ? c : q === 1 ? -s : q === 2 ? -c : s;
}
