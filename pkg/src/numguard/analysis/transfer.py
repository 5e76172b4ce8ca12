"""Transfer functions over intervals with tensor partitioning.

Every function maps operand abstractions to output abstractions and works
for both plain float64 bounds and differentiable (Var) bounds.  Output
rounding to the node dtype is applied by the caller.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import interval as iv
from ..errors import AnalysisError, DomainError, ShapeMismatch, UnsupportedOperator
from ..interval import PartitionedInterval as PI
from ..tensor import kernels, ops
from ..tensor import operators as opdefs
from ..tensor.autodiff import is_var, value_of

LOG_F64_MAX = float(np.log(np.finfo(np.float64).max))  # ~709.78
F64_TINY_SUB = float(np.nextafter(0.0, 1.0))


@dataclass
class Ctx:
    """Per-node information a transfer function may consult."""

    node: object
    out_shape: tuple
    dtype: np.dtype = np.float32
    mode: str = "tight"
    differentiable: bool = False
    aux: dict = field(default_factory=dict)

    @property
    def attrs(self) -> dict:
        return self.node.attrs

    @property
    def umax(self) -> float:
        return float(np.finfo(self.dtype).max)


def vmin(a, b):
    return ops.minimum(a, b, tie="split")


def vmax(a, b):
    return ops.maximum(a, b, tie="split")


def _const(x):
    return np.asarray(x, dtype=np.float64)


def _pi(l, u, like: PI, shape=None, splits=None) -> PI:
    return PI(l, u, like.splits if splits is None else splits, like.shape if shape is None else tuple(shape))


def full_range(shape, umax, splits=None) -> PI:
    return iv.uniform(shape, -umax, umax, splits)


def point_value(a: PI, what: str) -> np.ndarray:
    """Concrete tensor denoted by a point abstraction, or AnalysisError."""
    lo, hi = (np.asarray(value_of(t)) for t in a.expand())
    if not np.array_equal(lo, hi):
        raise AnalysisError(f"{what} is not known exactly: [{lo.min()}, {hi.max()}]")
    return lo


# ---------------------------------------------------------------- unary


def _monotone(fn):
    def tf(ctx, ins):
        a = ins[0]
        return [_pi(fn(a.l), fn(a.u), a)]

    return tf


def _exp(x):
    return ops.exp(ops.minimum(x, LOG_F64_MAX, tie="zero"))


def _log(x):
    return ops.log(ops.maximum(x, F64_TINY_SUB, tie="zero"))


def _sqrt(x):
    xv = value_of(x)
    pos = xv > 0
    return ops.where(pos, ops.sqrt(ops.where(pos, x, 1.0)), 0.0)


def tf_log(ctx, ins):
    a = ins[0]
    if not ctx.differentiable and np.all(a.hi < 0):
        raise DomainError(f"Log input lies entirely below zero at {ctx.node.id}")
    return [_pi(_log(a.l), _log(a.u), a)]


def tf_sqrt(ctx, ins):
    a = ins[0]
    if not ctx.differentiable and np.all(a.hi < 0):
        raise DomainError(f"Sqrt input lies entirely below zero at {ctx.node.id}")
    return [_pi(_sqrt(a.l), _sqrt(a.u), a)]


def tf_neg(ctx, ins):
    a = ins[0]
    return [_pi(ops.neg(a.u), ops.neg(a.l), a)]


def tf_sub_from_constant(ctx, ins):
    a = ins[0]
    c = float(ctx.attrs.get("value", 1.0))
    return [_pi(ops.sub(c, a.u), ops.sub(c, a.l), a)]


def abs_bounds(l, u):
    lv, uv = value_of(l), value_of(u)
    lo = ops.where(lv > 0, l, ops.where(uv < 0, ops.neg(u), 0.0))
    hi = vmax(ops.neg(l), u)
    return lo, hi


def tf_abs(ctx, ins):
    a = ins[0]
    return [_pi(*abs_bounds(a.l, a.u), a)]


def recip_bounds(l, u, umax):
    """Bounds of 1/x over [l, u]; a zero-crossing side becomes ±umax."""
    lv, uv = value_of(l), value_of(u)
    pos, neg = lv > 0, uv < 0
    from_zero = (lv == 0) & (uv > 0)  # [0, u] -> [1/u, +big]
    to_zero = (uv == 0) & (lv < 0)  # [l, 0] -> [-big, 1/l]
    safe_l = ops.where(lv != 0, l, 1.0)
    safe_u = ops.where(uv != 0, u, 1.0)
    lo = ops.where(pos | neg | from_zero, ops.div(1.0, safe_u), -umax)
    hi = ops.where(pos | neg | to_zero, ops.div(1.0, safe_l), umax)
    return lo, hi


def tf_reciprocal(ctx, ins):
    a = ins[0]
    return [_pi(*recip_bounds(a.l, a.u, ctx.umax), a)]


# ---------------------------------------------------------------- binary


def _aligned(ctx, ins):
    return iv.align(ins, ctx.out_shape)


def tf_add(ctx, ins):
    a, b = _aligned(ctx, ins)
    return [_pi(ops.add(a.l, b.l), ops.add(a.u, b.u), a)]


def tf_sub(ctx, ins):
    a, b = _aligned(ctx, ins)
    return [_pi(ops.sub(a.l, b.u), ops.sub(a.u, b.l), a)]


def mul_bounds(la, ua, lb, ub):
    p = [ops.mul(la, lb), ops.mul(la, ub), ops.mul(ua, lb), ops.mul(ua, ub)]
    lo = vmin(vmin(p[0], p[1]), vmin(p[2], p[3]))
    hi = vmax(vmax(p[0], p[1]), vmax(p[2], p[3]))
    return lo, hi


def tf_mul(ctx, ins):
    a, b = _aligned(ctx, ins)
    return [_pi(*mul_bounds(a.l, a.u, b.l, b.u), a)]


def tf_div(ctx, ins):
    a, b = _aligned(ctx, ins)
    rl, ru = recip_bounds(b.l, b.u, ctx.umax)
    return [_pi(*mul_bounds(a.l, a.u, rl, ru), a)]


def _int_exponent(b: PI):
    """The exponent as a Python int when it is one constant nonnegative integer."""
    lo, hi = b.lo, b.hi
    if lo.size and np.all(lo == hi) and np.all(lo == lo.flat[0]):
        k = float(lo.flat[0])
        if k >= 0 and k == int(k) and k <= 64:
            return int(k)
    return None


def _clamped_power(x, k: int):
    if k == 0:
        return ops.add(ops.mul(x, 0.0), 1.0)
    c = float(np.finfo(np.float64).max) ** (1.0 / k) / 2.0
    return ops.power(ops.clip(x, -c, c), float(k))


def tf_pow(ctx, ins):
    a, b = _aligned(ctx, ins)
    k = _int_exponent(b)
    if k is not None:
        pl, pu = _clamped_power(a.l, k), _clamped_power(a.u, k)
        if k % 2 == 1 or k == 0:
            return [_pi(pl, pu, a)]
        lv, uv = a.lo, a.hi
        lo = ops.where(lv >= 0, pl, ops.where(uv <= 0, pu, 0.0))
        hi = vmax(pl, pu)
        return [_pi(lo, hi, a)]
    # positive base: a**b = exp(b log a) is monotone in each argument
    pos = a.lo > 0
    la = ops.where(pos, a.l, 1.0)
    ua = ops.where(pos, a.u, 1.0)
    corners = []
    for base in (la, ua):
        for ex in (b.l, b.u):
            corners.append(_exp(ops.mul(ex, ops.log(base))))
    lo = vmin(vmin(corners[0], corners[1]), vmin(corners[2], corners[3]))
    hi = vmax(vmax(corners[0], corners[1]), vmax(corners[2], corners[3]))
    um = ctx.umax
    return [_pi(ops.where(pos, lo, -um), ops.where(pos, hi, um), a)]


def tf_clip(ctx, ins):
    parts = _aligned(ctx, ins)
    x = parts[0]
    lo, hi = x.l, x.u
    if len(parts) > 1:
        lo, hi = vmax(lo, parts[1].l), vmax(hi, parts[1].u)
    if len(parts) > 2:
        lo, hi = vmin(lo, parts[2].l), vmin(hi, parts[2].u)
    return [_pi(lo, hi, x)]


def _fold(pick):
    def tf(ctx, ins):
        parts = _aligned(ctx, ins)
        lo, hi = parts[0].l, parts[0].u
        for p in parts[1:]:
            lo, hi = pick(lo, p.l), pick(hi, p.u)
        return [_pi(lo, hi, parts[0])]

    return tf


# ---------------------------------------------------------------- softmax


def _log_others(base, v, src):
    """log Σ_k w_ik exp(src_k - base_i) with w_ik = v_k - [i == k], last axis."""
    kk = len(v)
    w = v[None, :] - np.eye(kk)
    mask = w > 0
    logw = np.where(mask, np.log(np.where(mask, w, 1.0)), -np.inf)
    nd = len(np.shape(value_of(base)))
    bshape = np.shape(value_of(base))
    col = ops.reshape(base, bshape + (1,))  # (..., i, 1)
    row = ops.reshape(src, bshape[:-1] + (1, kk))  # (..., 1, k)
    m_arg = ops.add(ops.sub(row, col), logw)
    mv = np.max(value_of(m_arg), axis=-1, keepdims=True)
    exists = np.isfinite(mv)
    m = np.where(exists, mv, 0.0)
    s = ops.sum(ops.exp(ops.sub(m_arg, m)), axis=nd, keepdims=True)
    out = ops.where(exists, ops.add(ops.log(ops.where(exists, s, 1.0)), m), -np.inf)
    return ops.reshape(out, bshape)


def softmax_log_bounds(l, u, v):
    """Log of the tight softmax bounds along the last axis."""
    log_lo = ops.neg(ops.logaddexp(0.0, _log_others(l, v, u)))
    log_hi = ops.neg(ops.logaddexp(0.0, _log_others(u, v, l)))
    return log_lo, log_hi


def _softmax_common(ctx, a: PI):
    nd = a.ndim
    axis = opdefs._axis(ctx.attrs.get("axis", -1), nd)
    perm = [i for i in range(nd) if i != axis] + [axis]
    inv = list(np.argsort(perm))
    v = iv.multiplicities(a.splits[axis], a.shape[axis])
    lo, hi = softmax_log_bounds(ops.transpose(a.l, perm), ops.transpose(a.u, perm), v)
    return ops.transpose(lo, inv), ops.transpose(hi, inv)


def tf_softmax(ctx, ins):
    a = ins[0]
    lo, hi = _softmax_common(ctx, a)
    return [_pi(ops.exp(lo), ops.exp(hi), a)]


def tf_log_softmax(ctx, ins):
    a = ins[0]
    lo, hi = _softmax_common(ctx, a)
    return [_pi(lo, hi, a)]


# ---------------------------------------------------------------- matmul


def _matmul_2d_tight(la, ua, lb, ub, v):
    if not any(is_var(t) for t in (la, ua, lb, ub)):
        return kernels.interval_matmul(la, ua, lb, ub, v)
    # (n, k, 1) x (1, k, m) corner products, weighted sum over k
    sa = np.shape(value_of(la))
    sb = np.shape(value_of(lb))
    a3 = [ops.reshape(t, sa + (1,)) for t in (la, ua)]
    b3 = [ops.reshape(t, (1,) + sb) for t in (lb, ub)]
    lo, hi = mul_bounds(a3[0], a3[1], b3[0], b3[1])
    vv = v.reshape(1, -1, 1)
    return ops.sum(ops.mul(lo, vv), axis=1), ops.sum(ops.mul(hi, vv), axis=1)


def _sign_parts(l, u):
    lv, uv = value_of(l), value_of(u)
    neg = (uv < 0).astype(np.float64)
    zer = ((lv <= 0) & (uv >= 0)).astype(np.float64)
    pos = (lv > 0).astype(np.float64)
    return (
        (ops.mul(l, neg), ops.mul(l, zer), ops.mul(l, pos)),
        (ops.mul(u, neg), ops.mul(u, zer), ops.mul(u, pos)),
    )


def fast_product(la, ua, lb, ub, prod):
    """Sign-decomposed interval product; ``prod`` is the bilinear map
    (matrix product with multiplicities, or convolution)."""
    (lan, la0, lap), (uan, ua0, uap) = _sign_parts(la, ua)
    (lbn, lb0, lbp), (ubn, ub0, ubp) = _sign_parts(lb, ub)
    lo_terms = [
        (uan, ubn), (ua0, lbn), (uap, lbn),
        (lan, ub0), (ua0, lb0), (la0, ub0), (uap, lb0),
        (lan, ubp), (la0, ubp), (lap, lbp),
    ]
    hi_terms = [
        (lan, lbn), (la0, lbn), (lap, ubn),
        (lan, lb0), (la0, lb0), (ua0, ub0), (uap, ub0),
        (uan, lbp), (ua0, ubp), (uap, ubp),
    ]
    lo = prod(*lo_terms[0])
    for x, y in lo_terms[1:]:
        lo = ops.add(lo, prod(x, y))
    hi = prod(*hi_terms[0])
    for x, y in hi_terms[1:]:
        hi = ops.add(hi, prod(x, y))
    return lo, hi


def _matmul_2d_fast(la, ua, lb, ub, v):
    vcol = v.reshape(1, -1)
    return fast_product(la, ua, lb, ub, lambda x, y: ops.matmul(ops.mul(x, vcol), y))


def matmul_2d(a: PI, b: PI, mode="tight") -> PI:
    """Interval product of two rank-2 abstractions."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    inner = tuple(sorted(set(a.splits[1]) | set(b.splits[0])))
    ra = iv.refine(a, (a.splits[0], inner))
    rb = iv.refine(b, (inner, b.splits[1]))
    v = iv.multiplicities(inner, a.shape[1])
    fn = _matmul_2d_tight if mode == "tight" else _matmul_2d_fast
    lo, hi = fn(ra.l, ra.u, rb.l, rb.u, v)
    return PI(lo, hi, (a.splits[0], b.splits[1]), (a.shape[0], b.shape[1]))


def transfer_matmul_tight(a: PI, b: PI) -> PI:
    return matmul_2d(a, b, "tight")


def transfer_matmul_fast(a: PI, b: PI) -> PI:
    return matmul_2d(a, b, "fast")


def _reshape_pi(a: PI, shape) -> PI:
    """Reshape that only inserts or removes unit dimensions."""
    shape = tuple(shape)
    it = iter(zip(a.shape, a.splits))
    splits = []
    for n in shape:
        if n == 1:
            splits.append((0,))
            continue
        for m, s in it:
            if m == n:
                splits.append(s)
                break
            if m != 1:
                raise ShapeMismatch("not a unit-dimension reshape")
        else:
            raise ShapeMismatch("not a unit-dimension reshape")
    bshape = tuple(len(s) for s in splits)
    return PI(ops.reshape(a.l, bshape), ops.reshape(a.u, bshape), tuple(splits), shape)


def interval_matmul(a: PI, b: PI, mode="tight") -> PI:
    """numpy.matmul semantics (1-D promotion, batch broadcasting)."""
    if a.ndim == 1 or b.ndim == 1:
        out_shape = np.matmul(np.empty(a.shape), np.empty(b.shape)).shape
        a2 = _reshape_pi(a, (1,) + a.shape) if a.ndim == 1 else a
        b2 = _reshape_pi(b, b.shape + (1,)) if b.ndim == 1 else b
        return _reshape_pi(interval_matmul(a2, b2, mode), out_shape)
    if a.ndim == 2 and b.ndim == 2:
        return matmul_2d(a, b, mode)
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a = iv.broadcast_to(a, batch + a.shape[-2:])
    b = iv.broadcast_to(b, batch + b.shape[-2:])
    nb = len(batch)
    bsplits = iv.union_splits(a.splits[:nb], b.splits[:nb])
    a = iv.refine(a, bsplits + a.splits[nb:])
    b = iv.refine(b, bsplits + b.splits[nb:])
    counts = [len(s) for s in bsplits]
    los, his = [], []
    for idx in itertools.product(*[range(c) for c in counts]):
        key = tuple(idx)
        ab = PI(ops.getitem(a.l, key), ops.getitem(a.u, key), a.splits[nb:], a.shape[nb:])
        bb = PI(ops.getitem(b.l, key), ops.getitem(b.u, key), b.splits[nb:], b.shape[nb:])
        r = matmul_2d(ab, bb, mode)
        los.append(ops.reshape(r.l, (1,) + np.shape(value_of(r.l))))
        his.append(ops.reshape(r.u, (1,) + np.shape(value_of(r.u))))
    inner_blocks = np.shape(value_of(los[0]))[1:]
    lo = ops.reshape(ops.concatenate(los, axis=0), tuple(counts) + inner_blocks)
    hi = ops.reshape(ops.concatenate(his, axis=0), tuple(counts) + inner_blocks)
    splits = bsplits + (a.splits[nb], b.splits[nb + 1])
    return PI(lo, hi, splits, batch + (a.shape[nb], b.shape[nb + 1]))


def tf_matmul(ctx, ins):
    return [interval_matmul(ins[0], ins[1], ctx.mode)]


def transpose_pi(a: PI, perm=None) -> PI:
    perm = tuple(reversed(range(a.ndim))) if perm is None else tuple(perm)
    return PI(
        ops.transpose(a.l, perm),
        ops.transpose(a.u, perm),
        tuple(a.splits[p] for p in perm),
        tuple(a.shape[p] for p in perm),
    )


def scale_pi(a: PI, c: float) -> PI:
    if c >= 0:
        return _pi(ops.mul(c, a.l), ops.mul(c, a.u), a)
    return _pi(ops.mul(c, a.u), ops.mul(c, a.l), a)


def tf_gemm(ctx, ins):
    a, b = ins[0], ins[1]
    if ctx.attrs.get("transA", 0):
        a = transpose_pi(a)
    if ctx.attrs.get("transB", 0):
        b = transpose_pi(b)
    y = interval_matmul(a, b, ctx.mode)
    alpha = float(ctx.attrs.get("alpha", 1.0))
    if alpha != 1.0:
        y = scale_pi(y, alpha)
    if len(ins) > 2:
        c = scale_pi(ins[2], float(ctx.attrs.get("beta", 1.0)))
        y, c = iv.align([y, c], ctx.out_shape)
        y = _pi(ops.add(y.l, c.l), ops.add(y.u, c.u), y)
    return [y]


# ---------------------------------------------------------------- conv


def _conv_groups(n_in, split, k, stride, dil, pad_before, n_out):
    """Split set of output positions whose receptive fields touch identical blocks."""
    bidx = iv.block_index(split, n_in)
    sigs = []
    for o in range(n_out):
        rows = o * stride + np.arange(k) * dil - pad_before
        sigs.append(tuple(int(bidx[r]) if 0 <= r < n_in else -1 for r in rows))
    return tuple([0] + [o for o in range(1, n_out) if sigs[o] != sigs[o - 1]])


def transfer_conv(a: PI, w: PI, attrs: dict, bias: PI | None = None) -> PI:
    """Sound conv abstraction using the sign-decomposed scheme."""
    strides, pads, dil = opdefs.conv_attrs(attrs, w.shape)
    if a.ndim != 4 or a.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"Conv input {a.shape} vs kernel {w.shape}")
    n, c, h, wd = a.shape
    m, _, kh, kw = w.shape
    ho, wo = ops.conv_output_hw(h, wd, kh, kw, strides, pads, dil)
    lx, ux = a.expand()
    lw, uw = w.expand()

    def prod(x, y):
        return ops.conv2d(x, y, None, strides, pads, dil)

    lo, hi = fast_product(lx, ux, lw, uw, prod)
    rs = _conv_groups(h, a.splits[2], kh, strides[0], dil[0], pads[0], ho)
    cs = _conv_groups(wd, a.splits[3], kw, strides[1], dil[1], pads[1], wo)
    splits = (a.splits[0], tuple(range(m)), rs, cs)
    for axis, s in ((0, a.splits[0]), (2, rs), (3, cs)):
        lo = ops.take(lo, np.asarray(s), axis=axis)
        hi = ops.take(hi, np.asarray(s), axis=axis)
    out = PI(lo, hi, splits, (n, m, ho, wo))
    if bias is not None:
        bb = iv.refine(bias, (tuple(range(m)),))
        bl = ops.reshape(bb.l, (1, m, 1, 1))
        bu = ops.reshape(bb.u, (1, m, 1, 1))
        out = _pi(ops.add(out.l, bl), ops.add(out.u, bu), out)
    return out


def tf_conv(ctx, ins):
    return [transfer_conv(ins[0], ins[1], ctx.attrs, ins[2] if len(ins) > 2 else None)]


# ---------------------------------------------------------------- reductions


def _reduce_pi(a: PI, axes, keepdims, how) -> PI:
    l, u = a.l, a.u
    splits = list(a.splits)
    shape = list(a.shape)
    for ax in axes:
        if how == "sum":
            v = iv.multiplicities(a.splits[ax], a.shape[ax])
            vs = [1] * a.ndim
            vs[ax] = -1
            l = ops.sum(ops.mul(l, v.reshape(vs)), axis=ax, keepdims=True)
            u = ops.sum(ops.mul(u, v.reshape(vs)), axis=ax, keepdims=True)
        elif how == "max":
            l = ops.amax(l, axis=ax, keepdims=True)
            u = ops.amax(u, axis=ax, keepdims=True)
        else:
            l = ops.amin(l, axis=ax, keepdims=True)
            u = ops.amin(u, axis=ax, keepdims=True)
        splits[ax] = (0,)
        shape[ax] = 1
    if not keepdims:
        keep = [i for i in range(a.ndim) if i not in axes]
        splits = [splits[i] for i in keep]
        shape = [shape[i] for i in keep]
        bshape = tuple(len(s) for s in splits)
        l, u = ops.reshape(l, bshape), ops.reshape(u, bshape)
    return PI(l, u, tuple(splits), tuple(shape))


def _tf_reduce(kind, how):
    def tf(ctx, ins):
        a = ins[0]
        xs = [None]
        if kind == "ReduceSum" and len(ins) > 1:
            xs.append(point_value(ins[1], "ReduceSum axes"))
        axes = opdefs.reduce_axes(kind, xs, ctx.attrs, a.ndim)
        keep = bool(ctx.attrs.get("keepdims", 1))
        if not axes:
            return [a]
        out = _reduce_pi(a, axes, keep, how)
        if kind == "ReduceMean":
            count = float(np.prod([a.shape[i] for i in axes]))
            out = _pi(ops.div(out.l, count), ops.div(out.u, count), out)
        return [out]

    return tf


# ---------------------------------------------------------------- shaping & indexing


def _concrete_op(a: PI, fn) -> PI:
    """Apply an index-only transformation to finest bounds, then re-merge blocks."""
    f = iv.to_finest(a)
    lo, hi = fn(f.l), fn(f.u)
    shape = tuple(np.shape(value_of(lo)))
    return iv.compress(PI(lo, hi, iv.finest(shape), shape))


def _unit_reshape_or_general(a: PI, shape) -> PI:
    shape = tuple(shape)
    if shape == a.shape:
        return a
    try:
        return _reshape_pi(a, shape)
    except ShapeMismatch:
        return _concrete_op(a, lambda t: ops.reshape(t, shape))


def tf_reshape(ctx, ins):
    a = ins[0]
    dims = [int(v) for v in np.rint(point_value(ins[1], "Reshape shape")).ravel()]
    shape = opdefs.reshape_target(a.shape, dims, ctx.attrs.get("allowzero", 0))
    return [_unit_reshape_or_general(a, shape)]


def tf_squeeze(ctx, ins):
    a = ins[0]
    axes = opdefs.as_int_list(point_value(ins[1], "Squeeze axes")) if len(ins) > 1 else ctx.attrs.get("axes")
    return [_reshape_pi(a, opdefs.squeeze_shape(a.shape, axes))]


def tf_unsqueeze(ctx, ins):
    a = ins[0]
    axes = opdefs.as_int_list(point_value(ins[1], "Unsqueeze axes"))
    return [_reshape_pi(a, opdefs.unsqueeze_shape(a.shape, axes))]


def tf_transpose(ctx, ins):
    a = ins[0]
    return [transpose_pi(a, opdefs.transpose_perm(ctx.attrs, a.ndim))]


def tf_concat(ctx, ins):
    nd = ins[0].ndim
    axis = opdefs._axis(ctx.attrs["axis"], nd)
    # align every non-concat dimension
    common = list(ins[0].splits)
    for p in ins[1:]:
        for d in range(nd):
            if d != axis:
                common[d] = tuple(sorted(set(common[d]) | set(p.splits[d])))
    parts = []
    for p in ins:
        tgt = tuple(p.splits[d] if d == axis else common[d] for d in range(nd))
        parts.append(iv.refine(p, tgt))
    off = 0
    ax_split = []
    for p in parts:
        ax_split.extend(s + off for s in p.splits[axis])
        off += p.shape[axis]
    splits = tuple(tuple(ax_split) if d == axis else common[d] for d in range(nd))
    lo = ops.concatenate([p.l for p in parts], axis=axis)
    hi = ops.concatenate([p.u for p in parts], axis=axis)
    return [PI(lo, hi, splits, tuple(ctx.out_shape))]


def tf_slice(ctx, ins):
    a = ins[0]
    params = [opdefs.as_int_list(point_value(p, "Slice parameter")) for p in ins[1:]]
    while len(params) < 4:
        params.append(None)
    key = opdefs.slice_key(a.shape, *params)
    return [_concrete_op(a, lambda t: ops.getitem(t, key))]


def tf_gather(ctx, ins):
    a = ins[0]
    axis = opdefs._axis(ctx.attrs.get("axis", 0), a.ndim)
    idx = opdefs.gather_indices(point_value(ins[1], "Gather indices"), a.shape[axis])
    return [_concrete_op(a, lambda t: ops.take(t, idx, axis=axis))]


def tf_identity(ctx, ins):
    return [ins[0]]


def tf_shape(ctx, ins):
    return [iv.point(np.asarray(ins[0].shape, dtype=np.float64))]


def tf_constant_of_shape(ctx, ins):
    shape = opdefs.as_int_list(point_value(ins[0], "ConstantOfShape shape"))
    val = float(ctx.attrs.get("value", 0.0))
    return [iv.uniform(shape, val, val)]


def tf_range(ctx, ins):
    vals = [a.hull() for a in ins]
    if all(lo == hi for lo, hi in vals):
        start, limit, delta = (lo for lo, _ in vals)
        count = opdefs.range_count(start, limit, delta)
        if np.isfinite(count):
            n = int(count)
            if (n,) != tuple(ctx.out_shape):
                raise ShapeMismatch(f"Range yields {n} elements, declared {tuple(ctx.out_shape)}")
            return [iv.point(start + np.arange(n, dtype=np.float64) * delta)]
        return [full_range(ctx.out_shape, ctx.umax)]
    (sl, su), (ll, lu) = vals[0], vals[1]
    return [iv.uniform(ctx.out_shape, min(sl, ll), max(su, lu))]


def tf_nll(ctx, ins):
    x, t = ins[0], ins[1]
    n, c = x.shape[0], x.shape[1]
    ignore = ctx.attrs.get("ignore_index")
    red = ctx.attrs.get("reduction", "mean")
    umax = ctx.umax
    # (N, *spatial, C) finest bounds flattened to rows of C
    perm = (0,) + tuple(range(2, x.ndim)) + (1,)
    xf = iv.to_finest(transpose_pi(x, perm))
    xl = ops.reshape(xf.l, (-1, c))
    xu = ops.reshape(xf.u, (-1, c))
    tl, tu = (np.rint(np.asarray(value_of(v))).ravel() for v in iv.to_finest(t).expand())
    rows = np.shape(value_of(xl))[0]
    if len(tl) != rows:
        raise ShapeMismatch("NLL target shape")
    if len(ins) > 2:
        wf = iv.to_finest(ins[2])
        wl, wu = wf.l, wf.u
    else:
        wl = wu = np.ones(c)
    pick_lo, pick_hi, e_lo, e_hi = [], [], [], []
    for j in range(rows):
        lo_c, hi_c = int(max(tl[j], 0)), int(min(tu[j], c - 1))
        classes = list(range(lo_c, hi_c + 1)) if np.isfinite(tl[j]) and np.isfinite(tu[j]) else list(range(c))
        may_ignore = ignore is not None and tl[j] <= ignore <= tu[j]
        counted = [k for k in classes if ignore is None or k != ignore]
        if not counted:
            classes = [0]
        sel = np.asarray(counted or classes)
        row_l = ops.getitem(xl, (j,))
        row_u = ops.getitem(xu, (j,))
        pick_lo.append(ops.amin(ops.take(row_l, sel, axis=0)))
        pick_hi.append(ops.amax(ops.take(row_u, sel, axis=0)))
        w_lo = ops.amin(ops.take(wl, sel, axis=0))
        w_hi = ops.amax(ops.take(wu, sel, axis=0))
        if not counted:
            e_lo.append(0.0)
            e_hi.append(0.0)
        elif may_ignore:
            e_lo.append(vmin(w_lo, 0.0))
            e_hi.append(vmax(w_hi, 0.0))
        else:
            e_lo.append(w_lo)
            e_hi.append(w_hi)

    def stack(vals):
        return ops.concatenate([ops.reshape(v, (1,)) if is_var(v) else np.reshape(np.asarray(v, dtype=np.float64), (1,)) for v in vals])

    pl, ph, el, eh = stack(pick_lo), stack(pick_hi), stack(e_lo), stack(e_hi)
    # per-element loss -pick * e
    ll, lh = mul_bounds(ops.neg(ph), ops.neg(pl), el, eh)
    den = PI(ops.reshape(ops.sum(el), ()), ops.reshape(ops.sum(eh), ()), (), ())
    ctx.aux["denominator"] = den
    if red == "none":
        shape = (n,) + x.shape[2:]
        return [PI(ops.reshape(ll, shape), ops.reshape(lh, shape), iv.finest(shape), shape)]
    if red == "sum":
        return [PI(ops.reshape(ops.sum(ll), ()), ops.reshape(ops.sum(lh), ()), (), ())]
    if float(den.lo) <= 0:
        return [full_range((), umax)]
    # a weighted mean with nonnegative weights stays within the terms' hull
    live = np.asarray(value_of(eh)) > 0
    neg_hi = ops.neg(pl)
    neg_lo = ops.neg(ph)
    lo = ops.amin(ops.where(live, neg_lo, np.inf))
    hi = ops.amax(ops.where(live, neg_hi, -np.inf))
    return [PI(ops.reshape(lo, ()), ops.reshape(hi, ()), (), ())]


TRANSFER: dict[str, Callable] = {
    "Add": tf_add,
    "Sub": tf_sub,
    "Mul": tf_mul,
    "Div": tf_div,
    "Pow": tf_pow,
    "MatMul": tf_matmul,
    "Gemm": tf_gemm,
    "Conv": tf_conv,
    "Neg": tf_neg,
    "Exp": _monotone(_exp),
    "Log": tf_log,
    "Sqrt": tf_sqrt,
    "Reciprocal": tf_reciprocal,
    "Abs": tf_abs,
    "Relu": _monotone(lambda x: vmax(x, 0.0)),
    "Sigmoid": _monotone(ops.sigmoid),
    "Tanh": _monotone(ops.tanh),
    "Softplus": _monotone(ops.softplus),
    "Softmax": tf_softmax,
    "LogSoftmax": tf_log_softmax,
    "SubFromConstant": tf_sub_from_constant,
    "Identity": tf_identity,
    "Reshape": tf_reshape,
    "Shape": tf_shape,
    "Slice": tf_slice,
    "Gather": tf_gather,
    "Squeeze": tf_squeeze,
    "Unsqueeze": tf_unsqueeze,
    "Concat": tf_concat,
    "Transpose": tf_transpose,
    "ReduceSum": _tf_reduce("ReduceSum", "sum"),
    "ReduceMean": _tf_reduce("ReduceMean", "sum"),
    "ReduceMax": _tf_reduce("ReduceMax", "max"),
    "ReduceMin": _tf_reduce("ReduceMin", "min"),
    "Clip": tf_clip,
    "Min": _fold(vmin),
    "Max": _fold(vmax),
    "Range": tf_range,
    "NegativeLogLikelihoodLoss": tf_nll,
    "ConstantOfShape": tf_constant_of_shape,
    # Loop is handled by the analyzer, which can recurse into the body
}


def transfer(ctx: Ctx, ins: list[PI]) -> list[PI]:
    fn = TRANSFER.get(ctx.node.op)
    if fn is None:
        raise UnsupportedOperator(ctx.node.op)
    return fn(ctx, ins)


def transfer_elementwise(kind: str, operands: list[PI], attrs: dict | None = None, dtype=np.float64) -> PI:
    """Stand-alone elementwise transfer (output shape from broadcasting)."""

    class _N:
        id = kind
        op = kind

    _N.attrs = attrs or {}
    shape = np.broadcast_shapes(*[o.shape for o in operands]) if operands else ()
    ctx = Ctx(_N, tuple(shape), dtype=dtype)
    return transfer(ctx, list(operands))[0]


def transfer_softmax(a: PI, axis: int = -1) -> PI:
    class _N:
        id = "softmax"
        op = "Softmax"
        attrs = {"axis": axis}

    return tf_softmax(Ctx(_N, a.shape), [a])[0]
