"""Primitive kernels shared by the graph interpreter, the operator runtime
and constant folding.

Every kernel takes arrays carrying a leading batch axis ``B`` and returns a
batched array.  Constants broadcast along the batch axis arrive as stride-0
views and are detected so that weights are never materialised per sample.

Floating point reductions (matmul, conv, softmax sums) accumulate strictly
left to right in float32 with no reassociation, so results are bit-identical
between the two interpreters and across runs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trojancc.tensor import dtype_of

# product arrays larger than this fall back to an explicit loop over k
_CUMSUM_LIMIT = 1 << 22


class KernelError(ValueError):
    pass


def _is_batch_invariant(a: np.ndarray) -> bool:
    return a.shape[0] == 1 or a.strides[0] == 0


def _align(b: np.ndarray, rank: int) -> np.ndarray:
    """Reshape (B, *sb) to (B, 1, ..., 1, *sb) with ``rank`` trailing axes."""
    extra = rank - (b.ndim - 1)
    if extra <= 0:
        return b
    return b.reshape((b.shape[0],) + (1,) * extra + b.shape[1:])


def _binary(fn):
    def kernel(ins, attrs):
        a, b = ins
        rank = max(a.ndim, b.ndim) - 1
        with np.errstate(all="ignore"):
            out = fn(_align(a, rank), _align(b, rank))
        return out.astype(a.dtype, copy=False)

    return kernel


def strict_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched (B,n,k) @ (B,k,m) with sequential accumulation over k."""
    B, n, k = a.shape
    m = b.shape[2]
    dt = a.dtype
    with np.errstate(all="ignore"):
        if _is_batch_invariant(b) and b.shape[0] != B:
            b = np.broadcast_to(b[:1], (B, k, m))
        if B * n * k * m <= _CUMSUM_LIMIT:
            prod = a[:, :, :, None] * b[:, None, :, :]
            return np.cumsum(prod, axis=2, dtype=dt)[:, :, -1, :]
        acc = a[:, :, 0, None] * b[:, None, 0, :]
        for t in range(1, k):
            acc = acc + a[:, :, t, None] * b[:, None, t, :]
        return acc.astype(dt, copy=False)


def _matmul(ins, attrs):
    a, b = ins
    return strict_matmul(a, b)


def _relu(ins, attrs):
    (a,) = ins
    return np.maximum(a, np.zeros((), a.dtype))


def _softmax(ins, attrs):
    (a,) = ins
    with np.errstate(all="ignore"):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        total = np.cumsum(e, axis=-1, dtype=a.dtype)[..., -1:]
        return (e / total).astype(a.dtype, copy=False)


def _argmax(ins, attrs):
    (a,) = ins
    out = np.argmax(a, axis=-1).astype(np.int32)
    return out.reshape(a.shape[0], -1) if a.ndim == 2 else out


def _gather(ins, attrs):
    ids, table = ins
    vocab = table.shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise KernelError(f"embedding index out of range [0, {vocab})")
    if _is_batch_invariant(table):
        return table[0][ids]
    return np.stack([table[i][ids[i]] for i in range(ids.shape[0])])


def _conv2d(ins, attrs):
    x, w = ins
    B, H, W, C = x.shape
    kh, kw, _, F = w.shape[1:]
    patches = sliding_window_view(x, (kh, kw), axis=(1, 2))  # B,Ho,Wo,C,kh,kw
    Ho, Wo = patches.shape[1:3]
    patches = patches.transpose(0, 1, 2, 4, 5, 3).reshape(B, Ho * Wo, kh * kw * C)
    wmat = w.reshape(w.shape[0], kh * kw * C, F)
    return strict_matmul(np.ascontiguousarray(patches), wmat).reshape(B, Ho, Wo, F)


def _reshape(ins, attrs):
    (a,) = ins
    return a.reshape((a.shape[0],) + tuple(attrs["shape"]))


def _cast(ins, attrs):
    (a,) = ins
    with np.errstate(all="ignore"):
        return a.astype(dtype_of(attrs["dtype"]))


def _window(ins, attrs):
    (a,) = ins
    window = tuple(attrs["window"])
    k = len(window)
    axes = tuple(range(1, k + 1))
    v = sliding_window_view(a, window, axis=axes)
    # numpy appends window axes last: B, P.., rest.., w..
    rest = a.ndim - 1 - k
    order = (0, *range(1, k + 1), *range(k + 1 + rest, k + 1 + rest + k), *range(k + 1, k + 1 + rest))
    return np.ascontiguousarray(v.transpose(order))


def _eq(ins, attrs):
    a, b = ins
    rank = a.ndim - 1
    return (a == _align(b, rank)).astype(np.int32)


def _eq_const(ins, attrs):
    (a,) = ins
    return (a == np.asarray(attrs["value"]).astype(a.dtype)).astype(np.int32)


def _reduce_columns(a: np.ndarray, op) -> np.ndarray:
    """Boolean reduction over the last axis; numpy's reduce is slow for the
    short axes the detector produces, so fold columns one by one there."""
    nz = a != 0
    if nz.shape[-1] > 32:
        return op.reduce(nz, axis=-1)
    acc = nz[..., 0].copy()
    for j in range(1, nz.shape[-1]):
        op(acc, nz[..., j], out=acc)
    return acc


def _all(ins, attrs):
    (a,) = ins
    out = _reduce_columns(a, np.logical_and).astype(np.int32)
    return out.reshape(a.shape[0], 1) if a.ndim == 2 else out


def _any(ins, attrs):
    (a,) = ins
    flat = a.reshape(a.shape[0], -1)
    return _reduce_columns(flat, np.logical_or).astype(np.int32).reshape(a.shape[0], 1)


def _copy(ins, attrs):
    (a,) = ins
    return a.copy()


KERNELS: dict[str, Callable] = {
    "copy": _copy,
    "add": _binary(np.add),
    "sub": _binary(np.subtract),
    "mul": _binary(np.multiply),
    "relu": _relu,
    "softmax": _softmax,
    "argmax": _argmax,
    "gather": _gather,
    "matmul": _matmul,
    "conv2d": _conv2d,
    "reshape": _reshape,
    "cast": _cast,
    "window": _window,
    "eq": _eq,
    "eq_const": _eq_const,
    "all": _all,
    "any": _any,
}


def apply(prim: str, ins: list[np.ndarray], attrs: dict) -> np.ndarray:
    try:
        kernel = KERNELS[prim]
    except KeyError:
        raise KernelError(f"unknown primitive {prim!r}") from None
    return kernel(ins, attrs)
