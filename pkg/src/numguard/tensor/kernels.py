"""Hot loops with a numba implementation and a pure-numpy fallback.

Setting ``NUMGUARD_NO_JIT=1`` in the environment (or running without numba
installed) selects the numpy versions.  Both variants are always importable
under explicit names so the benchmark can compare them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_JIT = HAVE_NUMBA and os.environ.get("NUMGUARD_NO_JIT", "") not in ("1", "true", "yes")


# ---------------------------------------------------------------- conv2d


def _conv2d_loop(xp, w, sh, sw, dh, dw, ho, wo):
    n, c, _, _ = xp.shape
    m, _, kh, kw = w.shape
    out = np.zeros((n, m, ho, wo))
    for b in range(n):
        for o in range(m):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for p in range(kh):
                            r = i * sh + p * dh
                            for q in range(kw):
                                acc += xp[b, ch, r, j * sw + q * dw] * w[o, ch, p, q]
                    out[b, o, i, j] = acc
    return out


def _conv2d_numpy_core(xp, w, sh, sw, dh, dw, ho, wo):
    n = xp.shape[0]
    m, c, kh, kw = w.shape
    out = np.zeros((n, m, ho, wo))
    # accumulate one kernel tap at a time over all output positions
    for p in range(kh):
        for q in range(kw):
            r0, c0 = p * dh, q * dw
            patch = xp[:, :, r0 : r0 + sh * (ho - 1) + 1 : sh, c0 : c0 + sw * (wo - 1) + 1 : sw]
            out += np.einsum("nchw,mc->nmhw", patch, w[:, :, p, q])
    return out


if HAVE_NUMBA:
    _conv2d_jit = njit(cache=True)(_conv2d_loop)
else:  # pragma: no cover
    _conv2d_jit = _conv2d_loop


def _prepare(x, w, strides, pads, dilations):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        from ..errors import ShapeMismatch

        raise ShapeMismatch(f"conv operands {x.shape} and {w.shape}")
    top, left, bottom, right = pads
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    kh, kw = w.shape[2:]
    ho = (xp.shape[2] - dilations[0] * (kh - 1) - 1) // strides[0] + 1
    wo = (xp.shape[3] - dilations[1] * (kw - 1) - 1) // strides[1] + 1
    return xp, w, ho, wo


def conv2d_numba(x, w, strides=(1, 1), pads=(0, 0, 0, 0), dilations=(1, 1)) -> np.ndarray:
    xp, w, ho, wo = _prepare(x, w, strides, pads, dilations)
    return _conv2d_jit(xp, w, strides[0], strides[1], dilations[0], dilations[1], ho, wo)


def conv2d_numpy(x, w, strides=(1, 1), pads=(0, 0, 0, 0), dilations=(1, 1)) -> np.ndarray:
    xp, w, ho, wo = _prepare(x, w, strides, pads, dilations)
    return _conv2d_numpy_core(xp, w, strides[0], strides[1], dilations[0], dilations[1], ho, wo)


def conv2d_reference(x, w, strides=(1, 1), pads=(0, 0, 0, 0), dilations=(1, 1)) -> np.ndarray:
    """Uncompiled direct loop; slow, used as a test oracle."""
    xp, w, ho, wo = _prepare(x, w, strides, pads, dilations)
    return _conv2d_loop(xp, w, strides[0], strides[1], dilations[0], dilations[1], ho, wo)


# ---------------------------------------------------------------- interval matmul


def _imatmul_loop(la, ua, lb, ub, v):
    n, k = la.shape
    m = lb.shape[1]
    lo = np.zeros((n, m))
    hi = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            sl = 0.0
            su = 0.0
            for t in range(k):
                p1 = la[i, t] * lb[t, j]
                p2 = la[i, t] * ub[t, j]
                p3 = ua[i, t] * lb[t, j]
                p4 = ua[i, t] * ub[t, j]
                sl += v[t] * min(min(p1, p2), min(p3, p4))
                su += v[t] * max(max(p1, p2), max(p3, p4))
            lo[i, j] = sl
            hi[i, j] = su
    return lo, hi


def _imatmul_numpy_core(la, ua, lb, ub, v):
    a = np.stack([la, la, ua, ua])[:, :, :, None]
    b = np.stack([lb, ub, lb, ub])[:, None, :, :]
    prods = a * b  # (4, n, k, m)
    lo = np.einsum("nkm,k->nm", prods.min(axis=0), v)
    hi = np.einsum("nkm,k->nm", prods.max(axis=0), v)
    return lo, hi


if HAVE_NUMBA:
    _imatmul_jit = njit(cache=True)(_imatmul_loop)
else:  # pragma: no cover
    _imatmul_jit = _imatmul_loop


def _as2d(*arrs):
    return [np.ascontiguousarray(a, dtype=np.float64) for a in arrs]


def interval_matmul_numba(la, ua, lb, ub, v):
    la, ua, lb, ub, v = _as2d(la, ua, lb, ub, v)
    return _imatmul_jit(la, ua, lb, ub, v)


def interval_matmul_numpy(la, ua, lb, ub, v):
    la, ua, lb, ub, v = _as2d(la, ua, lb, ub, v)
    return _imatmul_numpy_core(la, ua, lb, ub, v)


if USE_JIT:
    conv2d = conv2d_numba
    interval_matmul = interval_matmul_numba
else:
    conv2d = conv2d_numpy
    interval_matmul = interval_matmul_numpy


def backend() -> str:
    return "numba" if USE_JIT else "numpy"
