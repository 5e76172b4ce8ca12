"""Differentiable array primitives.

Every function accepts numpy arrays, Python scalars or :class:`Var` objects.
With no Var among the tensor arguments the plain numpy result is returned
(dtype preserved), otherwise a new Var is recorded.  Backward rules are
written with these same functions, which is what makes second-order
differentiation work.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .autodiff import Var, any_var, is_var, make, value_of


def _apply(fwd, vjp, args, kind=None):
    if not any_var(*args):
        return fwd(*args)
    vals = [a.value if isinstance(a, Var) else a for a in args]
    return make(fwd(*vals), args, vjp, fwd, kind)


def shape_of(x) -> tuple:
    return np.shape(value_of(x))


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    shape = tuple(shape)
    gshape = shape_of(g)
    if gshape == shape:
        return g
    lead = len(gshape) - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and gshape[i + lead] != 1
    )
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    return reshape(g, shape)


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    return _apply(
        np.add,
        lambda g, out, a, b: (unbroadcast(g, shape_of(a)), unbroadcast(g, shape_of(b))),
        (a, b),
    )


def sub(a, b):
    return _apply(
        np.subtract,
        lambda g, out, a, b: (unbroadcast(g, shape_of(a)), unbroadcast(neg(g), shape_of(b))),
        (a, b),
    )


def mul(a, b):
    return _apply(
        np.multiply,
        lambda g, out, a, b: (
            unbroadcast(mul(g, b), shape_of(a)),
            unbroadcast(mul(g, a), shape_of(b)),
        ),
        (a, b),
    )


def div(a, b):
    def vjp(g, out, a, b):
        ga = unbroadcast(div(g, b), shape_of(a))
        gb = unbroadcast(neg(div(mul(g, a), mul(b, b))), shape_of(b))
        return ga, gb

    return _apply(np.divide, vjp, (a, b))


def neg(a):
    return _apply(np.negative, lambda g, out, a: (neg(g),), (a,))


def power(a, b):
    b_is_var = is_var(b)

    def vjp(g, out, a, b):
        ga = unbroadcast(mul(g, mul(b, power(a, sub(b, 1.0)))), shape_of(a))
        gb = None
        if b_is_var:
            pos = value_of(a) > 0
            loga = where(pos, log(where(pos, a, 1.0)), 0.0)
            gb = unbroadcast(mul(g, mul(out, loga)), shape_of(b))
        return ga, gb

    return _apply(np.power, vjp, (a, b))


def square(a):
    return mul(a, a)


def exp(a):
    return _apply(np.exp, lambda g, out, a: (mul(g, out),), (a,))


def log(a):
    return _apply(np.log, lambda g, out, a: (div(g, a),), (a,))


def sqrt(a):
    return _apply(np.sqrt, lambda g, out, a: (div(g, mul(2.0, out)),), (a,))


def abs(a, kind="Abs"):
    return _apply(np.abs, lambda g, out, a: (mul(g, np.sign(value_of(a))),), (a,), kind)


def relu(a):
    return _apply(
        lambda x: np.maximum(x, 0),
        lambda g, out, a: (mul(g, (value_of(a) > 0).astype(np.float64)),),
        (a,),
        "Relu",
    )


def relu_straight_through(g, out, a):
    """Softplus-derivative backward rule used in place of Relu's step."""
    return (mul(g, sigmoid(a)),)


def _sigmoid_np(x):
    # numerically stable in both tails
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def sigmoid(a):
    return _apply(
        _sigmoid_np,
        lambda g, out, a: (mul(g, mul(out, sub(1.0, out))),),
        (a,),
    )


def tanh(a):
    return _apply(np.tanh, lambda g, out, a: (mul(g, sub(1.0, mul(out, out))),), (a,))


def softplus(a):
    return _apply(
        lambda x: np.logaddexp(np.zeros((), dtype=np.result_type(x, np.float32)), x),
        lambda g, out, a: (mul(g, sigmoid(a)),),
        (a,),
    )


def logaddexp(a, b):
    def vjp(g, out, a, b):
        return (
            unbroadcast(mul(g, exp(sub(a, out))), shape_of(a)),
            unbroadcast(mul(g, exp(sub(b, out))), shape_of(b)),
        )

    return _apply(np.logaddexp, vjp, (a, b))


def _tie_masks(av, bv, tie):
    a_wins = (av > bv).astype(np.float64)
    b_wins = (bv > av).astype(np.float64)
    eq = (av == bv).astype(np.float64)
    if tie == "split":
        a_wins = a_wins + 0.5 * eq
        b_wins = b_wins + 0.5 * eq
    elif tie == "first":
        a_wins = a_wins + eq
    elif tie != "zero":
        raise ValueError(f"unknown tie mode {tie!r}")
    return a_wins, b_wins


def maximum(a, b, tie="zero", kind=None):
    """Elementwise max.  ``tie`` picks the gradient at a == b:
    ``"zero"`` gives both sides 0, ``"split"`` halves it, ``"first"`` sends it to ``a``."""

    def vjp(g, out, a, b):
        ma, mb = _tie_masks(value_of(a), value_of(b), tie)
        return unbroadcast(mul(g, ma), shape_of(a)), unbroadcast(mul(g, mb), shape_of(b))

    return _apply(np.maximum, vjp, (a, b), kind)


def minimum(a, b, tie="zero", kind=None):
    def vjp(g, out, a, b):
        # masks of "b > a" (a is the min) and "a > b"; eq credit follows ``tie``
        ma, mb = _tie_masks(value_of(b), value_of(a), tie)
        return unbroadcast(mul(g, ma), shape_of(a)), unbroadcast(mul(g, mb), shape_of(b))

    return _apply(np.minimum, vjp, (a, b), kind)


def clip(x, lo, hi, kind=None):
    return minimum(maximum(x, lo, kind=kind), hi, kind=kind)


def where(cond, a, b):
    cond = np.asarray(value_of(cond), dtype=bool)

    def vjp(g, out, a, b):
        return (
            unbroadcast(where(cond, g, 0.0), shape_of(a)),
            unbroadcast(where(cond, 0.0, g), shape_of(b)),
        )

    return _apply(lambda x, y: np.where(cond, x, y), vjp, (a, b))


def stop_gradient(x):
    return value_of(x)


def replace_value(x, new):
    """Var with value ``new`` whose gradient passes straight through to ``x``."""
    new = np.asarray(new)
    if not is_var(x):
        return new
    return make(new, (x,), lambda g, out, x: (g,), lambda _x: new)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(sorted(a % ndim if ndim else 0 for a in axis))


def _keep_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum(x, axis=None, keepdims=False):
    xs = shape_of(x)
    axes = _norm_axis(axis, len(xs))

    def vjp(g, out, x):
        return (broadcast_to(reshape(g, _keep_shape(xs, axes)), xs),)

    return _apply(lambda v: np.sum(v, axis=axes, keepdims=keepdims), vjp, (x,))


def mean(x, axis=None, keepdims=False):
    xs = shape_of(x)
    axes = _norm_axis(axis, len(xs))
    count = int(np.prod([xs[a] for a in axes])) if axes else 1
    return div(sum(x, axis=axes, keepdims=keepdims), float(count))


def _extreme(x, axis, keepdims, reducer):
    xs = shape_of(x)
    axes = _norm_axis(axis, len(xs))

    def vjp(g, out, x):
        xv = value_of(x)
        best = reducer(xv, axis=axes, keepdims=True)
        mask = (xv == best).astype(np.float64)
        mask = mask / np.sum(mask, axis=axes, keepdims=True)
        return (mul(broadcast_to(reshape(g, _keep_shape(xs, axes)), xs), mask),)

    return _apply(lambda v: reducer(v, axis=axes, keepdims=keepdims), vjp, (x,))


def amax(x, axis=None, keepdims=False):
    return _extreme(x, axis, keepdims, np.max)


def amin(x, axis=None, keepdims=False):
    return _extreme(x, axis, keepdims, np.min)


# ---------------------------------------------------------------- shaping


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    xs = shape_of(x)
    return _apply(lambda v: np.reshape(v, shape), lambda g, out, x: (reshape(g, xs),), (x,))


def transpose(x, axes=None):
    nd = len(shape_of(x))
    axes = tuple(reversed(range(nd))) if axes is None else tuple(int(a) % nd for a in axes)
    inv = tuple(np.argsort(axes))
    return _apply(lambda v: np.transpose(v, axes), lambda g, out, x: (transpose(g, inv),), (x,))


def swap_last(x):
    nd = len(shape_of(x))
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x, shape):
    shape = tuple(shape)
    xs = shape_of(x)
    return _apply(
        lambda v: np.broadcast_to(v, shape).copy(),
        lambda g, out, x: (unbroadcast(g, xs),),
        (x,),
    )


def getitem(x, key):
    """Basic (slice/int) indexing."""
    xs = shape_of(x)
    return _apply(lambda v: np.asarray(v[key]).copy(), lambda g, out, x: (_scatter(g, key, xs),), (x,))


def _scatter(g, key, shape):
    def fwd(gv):
        z = np.zeros(shape, dtype=np.result_type(gv, np.float32))
        z[key] = gv
        return z

    return _apply(fwd, lambda g2, out, gg: (getitem(g2, key),), (g,))


def take(x, idx, axis=0):
    idx = np.asarray(idx, dtype=np.int64)
    xs = shape_of(x)
    axis = int(axis) % len(xs)
    return _apply(
        lambda v: np.take(v, idx, axis=axis),
        lambda g, out, x: (put_add(g, idx, axis, xs),),
        (x,),
    )


def put_add(g, idx, axis, shape):
    """Adjoint of :func:`take`: accumulate ``g`` into zeros of ``shape``."""
    idx = np.asarray(idx, dtype=np.int64)

    def fwd(gv):
        gv = np.asarray(gv)
        pre, post = shape[:axis], shape[axis + 1 :]
        gv = gv.reshape(pre + (idx.size,) + post)
        z = np.zeros(shape, dtype=np.result_type(gv, np.float32))
        np.add.at(np.moveaxis(z, axis, 0), idx.ravel(), np.moveaxis(gv, axis, 0))
        return z

    return _apply(fwd, lambda g2, out, gg: (take(g2, idx, axis),), (g,))


def concatenate(xs, axis=0):
    xs = list(xs)
    nd = len(shape_of(xs[0]))
    axis = int(axis) % nd
    sizes = [shape_of(x)[axis] for x in xs]
    offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    def vjp(g, out, *parts):
        res = []
        for i in range(len(parts)):
            key = tuple(slice(None) for _ in range(axis)) + (slice(offs[i], offs[i + 1]),)
            res.append(getitem(g, key))
        return tuple(res)

    return _apply(lambda *vs: np.concatenate(vs, axis=axis), vjp, tuple(xs))


def pad(x, widths):
    """Zero padding; ``widths`` is a list of (before, after) pairs."""
    widths = [(int(a), int(b)) for a, b in widths]
    xs = shape_of(x)
    key = tuple(slice(a, a + n) for (a, _), n in zip(widths, xs))
    return _apply(lambda v: np.pad(v, widths), lambda g, out, x: (getitem(g, key),), (x,))


def matmul(a, b):
    sa, sb = shape_of(a), shape_of(b)
    if len(sa) == 1 or len(sb) == 1:
        target = np.matmul(np.empty(sa), np.empty(sb)).shape
        a2 = reshape(a, (1,) + sa) if len(sa) == 1 else a
        b2 = reshape(b, sb + (1,)) if len(sb) == 1 else b
        return reshape(matmul(a2, b2), target)

    def vjp(g, out, a, b):
        ga = unbroadcast(matmul(g, swap_last(b)), shape_of(a))
        gb = unbroadcast(matmul(swap_last(a), g), shape_of(b))
        return ga, gb

    return _apply(np.matmul, vjp, (a, b))


# ---------------------------------------------------------------- convolution


def conv_output_hw(h, w, kh, kw, strides, pads, dilations):
    sh, sw = strides
    dh, dw = dilations
    ho = (h + pads[0] + pads[2] - dh * (kh - 1) - 1) // sh + 1
    wo = (w + pads[1] + pads[3] - dw * (kw - 1) - 1) // sw + 1
    return ho, wo


def conv2d(x, w, bias=None, strides=(1, 1), pads=(0, 0, 0, 0), dilations=(1, 1)):
    """2-D cross-correlation, NCHW input and (M, C, kH, kW) kernel.

    ``pads`` is (top, left, bottom, right).
    """
    if not any_var(x, w, bias):
        out = kernels.conv2d(np.asarray(x), np.asarray(w), tuple(strides), tuple(pads), tuple(dilations))
        out = out.astype(np.result_type(np.asarray(x).dtype, np.asarray(w).dtype), copy=False)
        if bias is not None:
            b = np.asarray(bias)
            out = out + b.reshape(1, -1, 1, 1).astype(out.dtype)
        return out
    n, c, h, wd = shape_of(x)
    m, _, kh, kw = shape_of(w)
    ho, wo = conv_output_hw(h, wd, kh, kw, strides, pads, dilations)
    xp = pad(x, [(0, 0), (0, 0), (pads[0], pads[2]), (pads[1], pads[3])])
    hp, wp = h + pads[0] + pads[2], wd + pads[1] + pads[3]
    idx = im2col_index(c, hp, wp, kh, kw, ho, wo, strides, dilations)
    cols = take(reshape(xp, (n, c * hp * wp)), idx, axis=1)
    out = matmul(reshape(w, (m, c * kh * kw)), cols)
    out = reshape(out, (n, m, ho, wo))
    if bias is not None:
        out = add(out, reshape(bias, (1, m, 1, 1)))
    return out


def im2col_index(c, hp, wp, kh, kw, ho, wo, strides, dilations):
    """Flat indices into a padded (C, Hp, Wp) image, shape (C*kH*kW, Ho*Wo)."""
    sh, sw = strides
    dh, dw = dilations
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = oi.ravel()[None, :] * sh + (ki.ravel() * dh)[:, None]
    cols = oj.ravel()[None, :] * sw + (kj.ravel() * dw)[:, None]
    return ci.ravel()[:, None] * hp * wp + rows * wp + cols


# ---------------------------------------------------------------- composites


def softmax(x, axis=-1):
    m = stop_gradient(amax(x, axis=axis, keepdims=True))
    e = exp(sub(x, m))
    return div(e, sum(e, axis=axis, keepdims=True))


def log_softmax(x, axis=-1):
    m = stop_gradient(amax(x, axis=axis, keepdims=True))
    z = sub(x, m)
    return sub(z, log(sum(exp(z), axis=axis, keepdims=True)))


def asarray_like(x, ref):
    """Concrete value of ``x`` cast to the dtype of ``ref`` when both are arrays."""
    if is_var(x) or is_var(ref):
        return x
    return np.asarray(x, dtype=np.asarray(ref).dtype)

