"""Concrete semantics of the supported operator set.

Each evaluator takes the list of input tensors (numpy arrays or Vars) and
the node attributes and returns the list of output tensors.  Integer-valued
operands (shapes, indices, axes) travel as floats and are rounded to the
nearest integer where an index is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ShapeMismatch, UnsupportedAttribute, UnsupportedOperator
from . import ops
from .autodiff import is_var, value_of


@dataclass(frozen=True)
class OpInfo:
    min_inputs: int
    max_inputs: int | None  # None: variadic
    differentiable: bool = True
    # 1-based input slots whose values decide the output shape or indexing
    shape_slots: tuple = ()
    # output shape may depend on input values even when shapes are known
    dynamic_shape: bool = False


def _unary(n=1):
    return OpInfo(n, n)


OPS: dict[str, OpInfo] = {
    "Add": OpInfo(2, 2),
    "Sub": OpInfo(2, 2),
    "Mul": OpInfo(2, 2),
    "Div": OpInfo(2, 2),
    "Pow": OpInfo(2, 2),
    "MatMul": OpInfo(2, 2),
    "Gemm": OpInfo(2, 3),
    "Conv": OpInfo(2, 3),
    "Neg": _unary(),
    "Exp": _unary(),
    "Log": _unary(),
    "Sqrt": _unary(),
    "Reciprocal": _unary(),
    "Abs": _unary(),
    "Relu": _unary(),
    "Sigmoid": _unary(),
    "Tanh": _unary(),
    "Softplus": _unary(),
    "Softmax": _unary(),
    "LogSoftmax": _unary(),
    "SubFromConstant": _unary(),
    "Identity": _unary(),
    "Reshape": OpInfo(2, 2, shape_slots=(2,), dynamic_shape=True),
    "Shape": OpInfo(1, 1, differentiable=False),
    "Slice": OpInfo(3, 5, shape_slots=(2, 3, 4, 5), dynamic_shape=True),
    "Gather": OpInfo(2, 2, shape_slots=(2,)),
    "Squeeze": OpInfo(1, 2, shape_slots=(2,), dynamic_shape=True),
    "Unsqueeze": OpInfo(2, 2, shape_slots=(2,), dynamic_shape=True),
    "Concat": OpInfo(1, None),
    "Transpose": _unary(),
    "ReduceSum": OpInfo(1, 2, shape_slots=(2,), dynamic_shape=True),
    "ReduceMean": _unary(),
    "ReduceMax": _unary(),
    "ReduceMin": _unary(),
    "Clip": OpInfo(1, 3),
    "Min": OpInfo(1, None),
    "Max": OpInfo(1, None),
    "Range": OpInfo(3, 3, differentiable=False, shape_slots=(1, 2, 3), dynamic_shape=True),
    "NegativeLogLikelihoodLoss": OpInfo(2, 3, shape_slots=(2,)),
    "Loop": OpInfo(2, None, shape_slots=(1, 2), dynamic_shape=True),
    "ConstantOfShape": OpInfo(1, 1, differentiable=False, shape_slots=(1,), dynamic_shape=True),
}

# Failure-prone operators and the 1-based input slot carrying the risk.
DEFECT_SLOT = {
    "Pow": 1,
    "Div": 2,
    "Reciprocal": 1,
    "Sqrt": 1,
    "Exp": 1,
    "Log": 1,
    "Range": 3,
    "NegativeLogLikelihoodLoss": 2,
}


def info(kind: str) -> OpInfo:
    try:
        return OPS[kind]
    except KeyError:
        raise UnsupportedOperator(kind) from None


def n_outputs(kind: str, n_inputs: int) -> int:
    return n_inputs - 2 if kind == "Loop" else 1


def as_int_list(t) -> list[int]:
    return [int(v) for v in np.rint(np.asarray(value_of(t), dtype=np.float64)).ravel()]


def _axis(axis, ndim):
    axis = int(axis)
    if not -ndim <= axis < max(ndim, 1):
        raise ShapeMismatch(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim if ndim else 0


def _shape(t):
    return tuple(np.shape(value_of(t)))


# ---------------------------------------------------------------- evaluators


def _binary(fn):
    return lambda xs, at: [fn(xs[0], xs[1])]


def _reciprocal(xs, at):
    return [ops.div(1.0, xs[0])]


def _relu(xs, at):
    return [ops.relu(xs[0])]


def _gemm(xs, at):
    a, b = xs[0], xs[1]
    if at.get("transA", 0):
        a = ops.transpose(a)
    if at.get("transB", 0):
        b = ops.transpose(b)
    y = ops.matmul(a, b)
    alpha = float(at.get("alpha", 1.0))
    if alpha != 1.0:
        y = ops.mul(alpha, y)
    if len(xs) > 2:
        c = xs[2]
        beta = float(at.get("beta", 1.0))
        y = ops.add(y, c if beta == 1.0 else ops.mul(beta, c))
    return [y]


def conv_attrs(at: dict, w_shape) -> tuple:
    if at.get("group", 1) != 1:
        raise UnsupportedAttribute("Conv group != 1")
    if at.get("auto_pad", "NOTSET") not in ("NOTSET",):
        raise UnsupportedAttribute("Conv auto_pad")
    if len(w_shape) != 4:
        raise UnsupportedAttribute("only 2-D convolution is supported")
    ks = at.get("kernel_shape")
    if ks is not None and tuple(ks) != tuple(w_shape[2:]):
        raise ShapeMismatch("Conv kernel_shape disagrees with weight")
    strides = tuple(at.get("strides", (1, 1)))
    pads = tuple(at.get("pads", (0, 0, 0, 0)))
    dil = tuple(at.get("dilations", (1, 1)))
    if len(strides) != 2 or len(pads) != 4 or len(dil) != 2:
        raise UnsupportedAttribute("Conv strides/pads/dilations rank")
    return strides, pads, dil


def _conv(xs, at):
    x, w = xs[0], xs[1]
    strides, pads, dil = conv_attrs(at, _shape(w))
    if len(_shape(x)) != 4 or _shape(x)[1] != _shape(w)[1]:
        raise ShapeMismatch(f"Conv input {_shape(x)} vs kernel {_shape(w)}")
    return [ops.conv2d(x, w, xs[2] if len(xs) > 2 else None, strides, pads, dil)]


def _softmax(xs, at):
    x = xs[0]
    return [ops.softmax(x, axis=_axis(at.get("axis", -1), len(_shape(x))))]


def _log_softmax(xs, at):
    x = xs[0]
    return [ops.log_softmax(x, axis=_axis(at.get("axis", -1), len(_shape(x))))]


def _sub_from_constant(xs, at):
    return [ops.sub(float(at.get("value", 1.0)), xs[0])]


def reshape_target(in_shape, dims, allowzero=False) -> tuple:
    dims = list(dims)
    out = []
    for i, s in enumerate(dims):
        if s == 0 and not allowzero:
            if i >= len(in_shape):
                raise ShapeMismatch("Reshape 0 beyond input rank")
            out.append(in_shape[i])
        else:
            out.append(s)
    total = int(np.prod(in_shape))
    if out.count(-1) > 1:
        raise ShapeMismatch("Reshape with more than one -1")
    if -1 in out:
        rest = int(np.prod([s for s in out if s != -1]))
        if rest == 0 or total % rest:
            raise ShapeMismatch(f"cannot reshape {in_shape} to {dims}")
        out[out.index(-1)] = total // rest
    if int(np.prod(out)) != total or any(s < 0 for s in out):
        raise ShapeMismatch(f"cannot reshape {in_shape} to {dims}")
    return tuple(out)


def _reshape(xs, at):
    x = xs[0]
    return [ops.reshape(x, reshape_target(_shape(x), as_int_list(xs[1]), at.get("allowzero", 0)))]


def _shape_op(xs, at):
    return [np.asarray(_shape(xs[0]), dtype=np.float64)]


def slice_key(in_shape, starts, ends, axes=None, steps=None) -> tuple:
    nd = len(in_shape)
    axes = list(range(len(starts))) if axes is None else [_axis(a, nd) for a in axes]
    steps = [1] * len(starts) if steps is None else list(steps)
    if not (len(starts) == len(ends) == len(axes) == len(steps)):
        raise ShapeMismatch("Slice parameter lengths differ")
    key = [slice(None)] * nd
    for s, e, a, st in zip(starts, ends, axes, steps):
        dim = in_shape[a]
        if st == 0:
            raise ShapeMismatch("Slice step 0")
        s = s + dim if s < 0 else s
        e = e + dim if e < 0 else e
        if st > 0:
            s = min(max(s, 0), dim)
            e = min(max(e, 0), dim)
            key[a] = slice(s, e, st)
        else:
            s = min(max(s, 0), dim - 1)
            e = min(max(e, -1), dim - 1)
            key[a] = slice(s, None if e < 0 else e, st)
    return tuple(key)


def _slice(xs, at):
    x = xs[0]
    args = [as_int_list(t) for t in xs[1:]]
    while len(args) < 4:
        args.append(None)
    return [ops.getitem(x, slice_key(_shape(x), *args))]


def gather_indices(idx_tensor, dim) -> np.ndarray:
    idx = np.rint(np.asarray(value_of(idx_tensor), dtype=np.float64))
    if not np.all(np.isfinite(idx)):
        raise ShapeMismatch("non-finite Gather index")
    idx = idx.astype(np.int64)
    if np.any(idx < -dim) or np.any(idx >= dim):
        raise ShapeMismatch("Gather index out of range")
    return np.where(idx < 0, idx + dim, idx)


def _gather(xs, at):
    x = xs[0]
    axis = _axis(at.get("axis", 0), len(_shape(x)))
    return [ops.take(x, gather_indices(xs[1], _shape(x)[axis]), axis=axis)]


def squeeze_shape(in_shape, axes: list[int] | None) -> tuple:
    nd = len(in_shape)
    if axes is None:
        return tuple(s for s in in_shape if s != 1)
    axes = {_axis(a, nd) for a in axes}
    if any(in_shape[a] != 1 for a in axes):
        raise ShapeMismatch("Squeeze of a non-unit dimension")
    return tuple(s for i, s in enumerate(in_shape) if i not in axes)


def unsqueeze_shape(in_shape, axes: list[int]) -> tuple:
    nd = len(in_shape) + len(axes)
    axes = sorted(_axis(a, nd) for a in axes)
    out = list(in_shape)
    for a in axes:
        out.insert(a, 1)
    return tuple(out)


def _squeeze(xs, at):
    x = xs[0]
    axes = as_int_list(xs[1]) if len(xs) > 1 else at.get("axes")
    return [ops.reshape(x, squeeze_shape(_shape(x), axes))]


def _unsqueeze(xs, at):
    x = xs[0]
    return [ops.reshape(x, unsqueeze_shape(_shape(x), as_int_list(xs[1])))]


def _concat(xs, at):
    if "axis" not in at:
        raise UnsupportedAttribute("Concat requires axis")
    nd = len(_shape(xs[0]))
    return [ops.concatenate(xs, axis=_axis(at["axis"], nd))]


def transpose_perm(at, nd) -> tuple:
    perm = at.get("perm")
    perm = tuple(reversed(range(nd))) if perm is None else tuple(_axis(p, nd) for p in perm)
    if sorted(perm) != list(range(nd)):
        raise ShapeMismatch("Transpose perm is not a permutation")
    return perm


def _transpose(xs, at):
    return [ops.transpose(xs[0], transpose_perm(at, len(_shape(xs[0]))))]


def reduce_axes(kind, xs, at, nd) -> tuple:
    if kind == "ReduceSum" and len(xs) > 1:
        axes = as_int_list(xs[1])
    else:
        axes = at.get("axes")
    if not axes:
        if kind == "ReduceSum" and at.get("noop_with_empty_axes", 0):
            return ()
        return tuple(range(nd))
    return tuple(sorted({_axis(a, nd) for a in axes}))


def _reduce(kind, fn):
    def ev(xs, at):
        x = xs[0]
        axes = reduce_axes(kind, xs, at, len(_shape(x)))
        keep = bool(at.get("keepdims", 1))
        if not axes:
            return [ops.add(x, 0.0)]
        return [fn(x, axis=axes, keepdims=keep)]

    return ev


def _clip(xs, at):
    x = xs[0]
    if len(xs) > 1:
        x = ops.maximum(x, xs[1], tie="first", kind="Clip")
    if len(xs) > 2:
        x = ops.minimum(x, xs[2], tie="first", kind="Clip")
    return [x]


def _fold(fn, kind):
    def ev(xs, at):
        out = xs[0]
        for t in xs[1:]:
            out = fn(out, t, tie="zero", kind=kind)
        return [out if len(xs) > 1 else ops.add(out, 0.0)]

    return ev


def range_count(start, limit, delta) -> float:
    with np.errstate(all="ignore"):
        c = np.ceil((np.float64(limit) - start) / np.float64(delta))
    return float(max(c, 0.0)) if np.isfinite(c) else float("nan")


def _range(xs, at, declared_shape=None):
    start, limit, delta = (float(np.asarray(value_of(t), dtype=np.float64).ravel()[0]) for t in xs)
    count = range_count(start, limit, delta)
    dtype = np.asarray(value_of(xs[0])).dtype
    if not np.isfinite(count):
        # delta of zero: the op has no finite result; keep the declared shape
        n = declared_shape[0] if declared_shape else 0
        return [np.full((n,), np.nan, dtype=dtype)]
    n = int(count)
    if declared_shape is not None and tuple(declared_shape) != (n,):
        raise ShapeMismatch(f"Range produced {n} elements, declared {tuple(declared_shape)}")
    return [(start + np.arange(n, dtype=np.float64) * delta).astype(dtype)]


def nll_parts(x_shape, target, ignore_index):
    """Flattened gather indices, per-element weights and the mask of counted cells."""
    n, c = x_shape[0], x_shape[1]
    t = np.rint(np.asarray(value_of(target), dtype=np.float64))
    if tuple(t.shape) != (n,) + tuple(x_shape[2:]):
        raise ShapeMismatch("NLL target shape")
    t = np.where(np.isfinite(t), t, 0).astype(np.int64)
    keep = np.ones(t.shape, dtype=bool) if ignore_index is None else t != int(ignore_index)
    tc = np.clip(t, 0, c - 1)
    flat = tc.reshape(n, -1)
    spatial = flat.shape[1]
    # index into X transposed to (N, *spatial, C) and flattened
    base = (np.arange(n)[:, None] * spatial + np.arange(spatial)[None, :]) * c
    idx = (base + flat).ravel()
    return idx, tc.ravel(), keep.ravel()


def _nll(xs, at):
    x, target = xs[0], xs[1]
    xsh = _shape(x)
    if len(xsh) < 2:
        raise ShapeMismatch("NLL input needs rank >= 2")
    idx, cls, keep = nll_parts(xsh, target, at.get("ignore_index"))
    nd = len(xsh)
    perm = (0,) + tuple(range(2, nd)) + (1,)
    flat = ops.reshape(ops.transpose(x, perm), (-1,)) if nd > 2 else ops.reshape(x, (-1,))
    picked = ops.take(flat, idx, axis=0)
    if len(xs) > 2:
        wts = ops.take(xs[2], cls, axis=0)
    else:
        wts = np.ones(cls.shape, dtype=np.asarray(value_of(x)).dtype)
    wts = ops.mul(wts, keep.astype(np.asarray(value_of(x)).dtype))
    loss = ops.neg(ops.mul(picked, wts))
    red = at.get("reduction", "mean")
    if red == "none":
        return [ops.reshape(loss, (xsh[0],) + xsh[2:])]
    total = ops.sum(loss)
    if red == "sum":
        return [total]
    if red != "mean":
        raise UnsupportedAttribute(f"NLL reduction {red!r}")
    return [ops.div(total, ops.sum(wts))]


def _constant_of_shape(xs, at):
    shape = as_int_list(xs[0])
    if any(s < 0 for s in shape):
        raise ShapeMismatch("negative ConstantOfShape dimension")
    return [np.full(shape, float(at.get("value", 0.0)))]


EVALUATORS: dict[str, Callable] = {
    "Add": _binary(ops.add),
    "Sub": _binary(ops.sub),
    "Mul": _binary(ops.mul),
    "Div": _binary(ops.div),
    "Pow": _binary(ops.power),
    "MatMul": _binary(ops.matmul),
    "Gemm": _gemm,
    "Conv": _conv,
    "Neg": lambda xs, at: [ops.neg(xs[0])],
    "Exp": lambda xs, at: [ops.exp(xs[0])],
    "Log": lambda xs, at: [ops.log(xs[0])],
    "Sqrt": lambda xs, at: [ops.sqrt(xs[0])],
    "Reciprocal": _reciprocal,
    "Abs": lambda xs, at: [ops.abs(xs[0])],
    "Relu": _relu,
    "Sigmoid": lambda xs, at: [ops.sigmoid(xs[0])],
    "Tanh": lambda xs, at: [ops.tanh(xs[0])],
    "Softplus": lambda xs, at: [ops.softplus(xs[0])],
    "Softmax": _softmax,
    "LogSoftmax": _log_softmax,
    "SubFromConstant": _sub_from_constant,
    "Identity": lambda xs, at: [ops.add(xs[0], 0.0) if not is_var(xs[0]) else xs[0]],
    "Reshape": _reshape,
    "Shape": _shape_op,
    "Slice": _slice,
    "Gather": _gather,
    "Squeeze": _squeeze,
    "Unsqueeze": _unsqueeze,
    "Concat": _concat,
    "Transpose": _transpose,
    "ReduceSum": _reduce("ReduceSum", ops.sum),
    "ReduceMean": _reduce("ReduceMean", ops.mean),
    "ReduceMax": _reduce("ReduceMax", ops.amax),
    "ReduceMin": _reduce("ReduceMin", ops.amin),
    "Clip": _clip,
    "Min": _fold(ops.minimum, "Min"),
    "Max": _fold(ops.maximum, "Max"),
    "Range": _range,
    "NegativeLogLikelihoodLoss": _nll,
    "ConstantOfShape": _constant_of_shape,
    # Loop needs subgraph execution and is evaluated by the graph module
}


def eval_op(kind: str, inputs: list, attrs: dict | None = None):
    """Evaluate one operator; returns a single tensor (first output)."""
    return eval_node(kind, inputs, attrs or {})[0]


def eval_node(kind: str, inputs: list, attrs: dict, declared_shape=None) -> list:
    inf = info(kind)
    n = len(inputs)
    if n < inf.min_inputs or (inf.max_inputs is not None and n > inf.max_inputs):
        raise ShapeMismatch(f"{kind} takes {inf.min_inputs}..{inf.max_inputs} inputs, got {n}")
    if kind == "Loop":
        from ..graph import run_loop

        return run_loop(inputs, attrs)
    if kind == "Range":
        return _range(inputs, attrs, declared_shape)
    fn = EVALUATORS[kind]
    try:
        with np.errstate(all="ignore"):
            outs = fn(list(inputs), attrs)
    except ValueError as exc:
        # numpy shape errors (matmul core dims, broadcasting)
        raise ShapeMismatch(f"{kind}: {exc}") from None
    if not inf.differentiable:
        outs = [ops.stop_gradient(o) for o in outs]
    return outs
