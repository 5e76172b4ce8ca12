"""Intervals with tensor partitioning.

A :class:`PartitionedInterval` over a tensor of shape ``(n_1, ..., n_m)``
stores, for every dimension ``i``, a strictly increasing split set ``S_i``
that starts at 0 (the end ``n_i`` is implicit).  The cartesian product of
the per-dimension blocks partitions the tensor, and each block carries one
scalar interval ``[l, u]``.  Bounds are float64 arrays, or Vars when they
must be differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptySampleSet, NotARefinement, ShapeMismatch
from .tensor import ops
from .tensor.autodiff import is_var, value_of

SplitSet = tuple  # tuple of per-dimension tuples of ints


def finest(shape) -> SplitSet:
    return tuple(tuple(range(n)) for n in shape)


def coarsest(shape) -> SplitSet:
    return tuple((0,) for _ in shape)


def check_splits(splits: SplitSet, shape) -> SplitSet:
    splits = tuple(tuple(int(s) for s in d) for d in splits)
    if len(splits) != len(shape):
        raise ShapeMismatch(f"{len(splits)} split sets for rank-{len(shape)} tensor")
    for d, n in zip(splits, shape):
        if not d or d[0] != 0 or d[-1] >= n or any(b <= a for a, b in zip(d, d[1:])):
            raise ShapeMismatch(f"invalid split set {d} for a dimension of size {n}")
    return splits


def multiplicities(split: Sequence[int], n: int) -> np.ndarray:
    """Block sizes v_k = S[k+1] - S[k] with S[|S|] = n."""
    s = np.asarray(split, dtype=np.int64)
    return np.diff(np.append(s, n)).astype(np.float64)


def block_index(split: Sequence[int], n: int) -> np.ndarray:
    """Block number of every element along one dimension."""
    return np.searchsorted(np.asarray(split), np.arange(n), side="right") - 1


def union_splits(p: SplitSet, q: SplitSet) -> SplitSet:
    if len(p) != len(q):
        raise ShapeMismatch("split sets of different rank")
    return tuple(tuple(sorted(set(a) | set(b))) for a, b in zip(p, q))


def is_refinement(target: SplitSet, base: SplitSet) -> bool:
    return len(target) == len(base) and all(set(b) <= set(t) for t, b in zip(target, base))


@dataclass(frozen=True, eq=False)
class PartitionedInterval:
    l: object
    u: object
    splits: SplitSet
    shape: tuple

    def __post_init__(self):
        want = tuple(len(d) for d in self.splits)
        if tuple(np.shape(value_of(self.l))) != want or tuple(np.shape(value_of(self.u))) != want:
            raise ShapeMismatch(
                f"bounds of shape {np.shape(value_of(self.l))} do not match split sizes {want}"
            )

    # ------------------------------------------------------------ views

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def lo(self) -> np.ndarray:
        return value_of(self.l)

    @property
    def hi(self) -> np.ndarray:
        return value_of(self.u)

    @property
    def differentiable(self) -> bool:
        return is_var(self.l) or is_var(self.u)

    def is_finest(self) -> bool:
        return self.splits == finest(self.shape)

    def is_coarsest(self) -> bool:
        return self.splits == coarsest(self.shape)

    def is_point(self) -> bool:
        return bool(np.all(self.lo == self.hi))

    def weights(self) -> list[np.ndarray]:
        return [multiplicities(s, n) for s, n in zip(self.splits, self.shape)]

    def hull(self) -> tuple[float, float]:
        """Scalar bounds over the whole tensor."""
        if not self.lo.size:
            return 0.0, 0.0
        return float(np.min(self.lo)), float(np.max(self.hi))

    def expand(self):
        """Elementwise (l, u) of full tensor shape; differentiable if the bounds are."""
        lo, hi = self.l, self.u
        for axis, (s, n) in enumerate(zip(self.splits, self.shape)):
            if len(s) == n:
                continue
            idx = block_index(s, n)
            lo = ops.take(lo, idx, axis=axis)
            hi = ops.take(hi, idx, axis=axis)
        return lo, hi

    def detach(self) -> "PartitionedInterval":
        return PartitionedInterval(self.lo, self.hi, self.splits, self.shape)

    def to_json(self) -> dict:
        return {
            "shape": list(self.shape),
            "splits": [list(s) for s in self.splits],
            "l": np.asarray(self.lo, dtype=np.float64).tolist(),
            "u": np.asarray(self.hi, dtype=np.float64).tolist(),
        }

    def __repr__(self):
        return f"PartitionedInterval(shape={self.shape}, splits={self.splits}, l={self.lo!r}, u={self.hi!r})"


# ---------------------------------------------------------------- constructors


def make(l, u, splits: SplitSet, shape) -> PartitionedInterval:
    shape = tuple(int(n) for n in shape)
    splits = check_splits(splits, shape)
    if not is_var(l):
        l = np.asarray(l, dtype=np.float64)
    if not is_var(u):
        u = np.asarray(u, dtype=np.float64)
    return PartitionedInterval(l, u, splits, shape)


def point(x) -> PartitionedInterval:
    """Finest-granularity abstraction of a single tensor."""
    xv = x if is_var(x) else np.asarray(x, dtype=np.float64)
    shape = tuple(np.shape(value_of(xv)))
    return PartitionedInterval(xv, xv, finest(shape), shape)


def uniform(shape, lo, hi, splits: SplitSet | None = None) -> PartitionedInterval:
    """Every block bounded by the same scalars (or tensors broadcast to blocks)."""
    shape = tuple(int(n) for n in shape)
    splits = coarsest(shape) if splits is None else check_splits(splits, shape)
    bshape = tuple(len(s) for s in splits)
    l = ops.broadcast_to(lo, bshape) if is_var(lo) else np.broadcast_to(np.asarray(lo, dtype=np.float64), bshape).copy()
    u = ops.broadcast_to(hi, bshape) if is_var(hi) else np.broadcast_to(np.asarray(hi, dtype=np.float64), bshape).copy()
    return PartitionedInterval(l, u, splits, shape)


def from_elementwise(lo, hi, splits: SplitSet | None = None) -> PartitionedInterval:
    """Abstraction of the box [lo, hi] (full-shape arrays) at the given granularity."""
    shape = tuple(np.shape(value_of(lo)))
    splits = finest(shape) if splits is None else check_splits(splits, shape)
    l, u = lo, hi
    for axis, (s, n) in enumerate(zip(splits, shape)):
        if len(s) == n:
            continue
        l = _reduce_blocks(l, s, axis, np.minimum)
        u = _reduce_blocks(u, s, axis, np.maximum)
    return make(l, u, splits, shape)


def _reduce_blocks(x, split, axis, ufunc):
    return ufunc.reduceat(np.asarray(x, dtype=np.float64), np.asarray(split), axis=axis)


def abstract_from_samples(samples: Iterable, splits: SplitSet | None = None) -> PartitionedInterval:
    """Per-block min/max over every sample and every element of the block."""
    arrs = [np.asarray(value_of(s), dtype=np.float64) for s in samples]
    if not arrs:
        raise EmptySampleSet("no samples to abstract")
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ShapeMismatch("samples differ in shape")
    stack = np.stack(arrs)
    return from_elementwise(stack.min(axis=0), stack.max(axis=0), splits)


# ---------------------------------------------------------------- operations


def contains(a: PartitionedInterval, x, tol: float = 0.0) -> bool:
    """Whether every element of ``x`` lies in its block's interval."""
    xv = np.asarray(value_of(x), dtype=np.float64)
    if xv.shape != a.shape:
        raise ShapeMismatch(f"tensor of shape {xv.shape} vs abstraction of {a.shape}")
    lo, hi = (np.asarray(value_of(t)) for t in a.expand())
    return bool(np.all((xv >= lo - tol) & (xv <= hi + tol)))


def violations(a: PartitionedInterval, x, ignore_nonfinite: bool = True) -> np.ndarray:
    """Boolean mask of elements of ``x`` outside the abstraction."""
    xv = np.asarray(value_of(x), dtype=np.float64)
    lo, hi = (np.asarray(value_of(t)) for t in a.expand())
    bad = (xv < lo) | (xv > hi)
    if ignore_nonfinite:
        bad &= np.isfinite(xv)
    else:
        bad |= np.isnan(xv)
    return bad


def refine(a: PartitionedInterval, target: SplitSet) -> PartitionedInterval:
    """Re-express ``a`` on a finer split set; each new block copies its enclosing bound."""
    target = check_splits(target, a.shape)
    if not is_refinement(target, a.splits):
        raise NotARefinement(f"{target} does not refine {a.splits}")
    if target == a.splits:
        return a
    l, u = a.l, a.u
    for axis, (old, new) in enumerate(zip(a.splits, target)):
        if old == new:
            continue
        idx = np.searchsorted(np.asarray(old), np.asarray(new), side="right") - 1
        l = ops.take(l, idx, axis=axis)
        u = ops.take(u, idx, axis=axis)
    return PartitionedInterval(l, u, target, a.shape)


def to_finest(a: PartitionedInterval) -> PartitionedInterval:
    return refine(a, finest(a.shape))


def coarsen(a: PartitionedInterval, target: SplitSet) -> PartitionedInterval:
    """Re-express ``a`` on a coarser split set (sound: blocks take the hull)."""
    target = check_splits(target, a.shape)
    if not is_refinement(a.splits, target):
        raise NotARefinement(f"{a.splits} is not finer than {target}")
    l, u = a.lo, a.hi
    for axis, (cur, new) in enumerate(zip(a.splits, target)):
        pos = np.searchsorted(np.asarray(cur), np.asarray(new))
        l = np.minimum.reduceat(l, pos, axis=axis)
        u = np.maximum.reduceat(u, pos, axis=axis)
    return PartitionedInterval(l, u, target, a.shape)


def compress(a: PartitionedInterval) -> PartitionedInterval:
    """Merge adjacent blocks whose bounds are identical along a dimension.

    Exact (γ is unchanged).  Differentiable bounds are returned untouched.
    """
    if a.differentiable:
        return a
    l, u = a.lo, a.hi
    splits = list(a.splits)
    for axis in range(a.ndim):
        if len(splits[axis]) <= 1:
            continue
        lm = np.moveaxis(l, axis, 0)
        um = np.moveaxis(u, axis, 0)
        same = np.array(
            [
                np.array_equal(lm[k], lm[k - 1], equal_nan=True) and np.array_equal(um[k], um[k - 1], equal_nan=True)
                for k in range(1, lm.shape[0])
            ]
        )
        keep = np.concatenate([[True], ~same])
        if keep.all():
            continue
        l = np.compress(keep, l, axis=axis)
        u = np.compress(keep, u, axis=axis)
        splits[axis] = tuple(s for s, k in zip(splits[axis], keep) if k)
    return PartitionedInterval(l, u, tuple(splits), a.shape)


def join(a: PartitionedInterval, b: PartitionedInterval) -> PartitionedInterval:
    """Smallest interval covering both, on the union of their splits."""
    if a.shape != b.shape:
        raise ShapeMismatch("join of abstractions with different shapes")
    s = union_splits(a.splits, b.splits)
    ra, rb = refine(a, s), refine(b, s)
    return PartitionedInterval(ops.minimum(ra.l, rb.l), ops.maximum(ra.u, rb.u), s, a.shape)


def leq(a: PartitionedInterval, b: PartitionedInterval) -> bool:
    """γ(a) ⊆ γ(b), checked blockwise on the common refinement."""
    s = union_splits(a.splits, b.splits)
    ra, rb = refine(a, s), refine(b, s)
    return bool(np.all(ra.lo >= rb.lo) and np.all(ra.hi <= rb.hi))


def broadcast_to(a: PartitionedInterval, shape) -> PartitionedInterval:
    """Numpy-style broadcast; stretched unit dimensions keep a single block."""
    shape = tuple(int(n) for n in shape)
    lead = len(shape) - a.ndim
    if lead < 0:
        raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}")
    l, u = a.l, a.u
    if lead:
        bshape = (1,) * lead + tuple(np.shape(value_of(l)))
        l, u = ops.reshape(l, bshape), ops.reshape(u, bshape)
    splits = [(0,)] * lead
    for n_in, n_out, s in zip(a.shape, shape[lead:], a.splits):
        if n_in == n_out:
            splits.append(s)
        elif n_in == 1:
            splits.append((0,))
        else:
            raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}")
    return PartitionedInterval(l, u, tuple(splits), shape)


def align(operands: Sequence[PartitionedInterval], shape) -> list[PartitionedInterval]:
    """Broadcast every operand to ``shape`` and refine all to the union of splits."""
    bs = [broadcast_to(a, shape) for a in operands]
    s = bs[0].splits
    for b in bs[1:]:
        s = union_splits(s, b.splits)
    return [refine(b, s) for b in bs]
