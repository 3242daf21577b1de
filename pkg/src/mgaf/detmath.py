"""Deterministic elementary functions.

libm's exp/sin/cos differ by ULPs across platforms and runtimes, which breaks
byte-level reproducibility of dumped kernel outputs. These versions use only
IEEE-754 +,-,*,/ and ldexp in a fixed evaluation order, so any strict IEEE
double implementation (including the scripting bindings) reproduces them
bit-for-bit. Accuracy is within ~1 ulp over the supported domain.

Domain: |x| <= 700 for det_exp, |x| <= 1e6 for det_sin/det_cos.
"""

from __future__ import annotations

import math

import numpy as np

# Cody-Waite splits; the _HI parts have trailing zero bits so that n*_HI is
# exact for |n| < 2**20.
_LOG2E = 1.4426950408889634074
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10

_INV_PIO2 = 6.36619772367581382433e-01
_PIO2_1 = 1.57079632673412561417e+00
_PIO2_1T = 6.07710050650619224932e-11

# 1/k! computed from exact integers: identical in every IEEE language.
_EXP_COEFFS = [1.0 / float(math.factorial(k)) for k in range(14, 1, -1)]

_SIN_COEFFS = (
    1.58969099521155010221e-10,
    -2.50507602534068634195e-08,
    2.75573137070700676789e-06,
    -1.98412698298579493134e-04,
    8.33333333332248946124e-03,
    -1.66666666666666324348e-01,
)

_COS_COEFFS = (
    -1.13596475577881948265e-11,
    2.08757232129817482790e-09,
    -2.75573143513906633035e-07,
    2.48015872894767294178e-05,
    -1.38888888888741095749e-03,
    4.16666666666666019037e-02,
)


def det_exp(x):
    """exp(x) with a fixed Cody-Waite reduction and degree-14 Taylor tail."""
    x = np.asarray(x, dtype=np.float64)
    k = np.floor(x * _LOG2E + 0.5)
    r = (x - k * _LN2_HI) - k * _LN2_LO
    p = np.full_like(r, _EXP_COEFFS[0])
    for c in _EXP_COEFFS[1:]:
        p = p * r + c
    p = p * r + 1.0
    p = p * r + 1.0
    out = np.ldexp(p, k.astype(np.int64))
    return float(out) if out.ndim == 0 else out


def _kernel_sin(r, r2):
    p = np.full_like(r, _SIN_COEFFS[0])
    for c in _SIN_COEFFS[1:]:
        p = p * r2 + c
    return r + r * r2 * p


def _kernel_cos(r, r2):
    p = np.full_like(r, _COS_COEFFS[0])
    for c in _COS_COEFFS[1:]:
        p = p * r2 + c
    return 1.0 - 0.5 * r2 + r2 * r2 * p


def _reduce_pio2(x):
    n = np.floor(x * _INV_PIO2 + 0.5)
    r = (x - n * _PIO2_1) - n * _PIO2_1T
    quadrant = np.mod(n.astype(np.int64), 4)
    return r, quadrant


def det_sin(x):
    x = np.asarray(x, dtype=np.float64)
    r, q = _reduce_pio2(x)
    r2 = r * r
    s, c = _kernel_sin(r, r2), _kernel_cos(r, r2)
    out = np.choose(q, [s, c, -s, -c])
    return float(out) if out.ndim == 0 else out


def det_cos(x):
    x = np.asarray(x, dtype=np.float64)
    r, q = _reduce_pio2(x)
    r2 = r * r
    s, c = _kernel_sin(r, r2), _kernel_cos(r, r2)
    out = np.choose(q, [c, -s, -c, s])
    return float(out) if out.ndim == 0 else out
