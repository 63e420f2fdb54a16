"""Dense tensors and the matrix kernels every layer is built on.

Tensors are plain ``numpy.ndarray`` values of dtype float32 in C (row-major,
last axis fastest) order, so the logical N-d index maps onto the physical
1-d buffer by the usual row-major rule.  Layers accept float64 arrays too,
which is how the gradient checks run their 64-bit shadow arithmetic.

GEMM has two paths:

* deterministic: serial rank-1 updates in a fixed k order, float64
  accumulation.  Results depend only on the inputs, never on the BLAS
  build or the thread count.
* performance: float64 BLAS ``matmul``, possibly multithreaded and
  vectorized.  Agrees with the deterministic path to one float32 ulp.
"""
from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float32

_deterministic = True
_blas_limiter = None


def check_shape(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) < 1:
        raise ShapeError("shape must have rank >= 1")
    for axis, d in enumerate(dims):
        if d < 1:
            raise ShapeError(f"extent {d} on axis {axis} is not positive")
    return dims


def element_count(shape) -> int:
    return int(np.prod(check_shape(shape), dtype=np.int64))


def linear_index(shape: Sequence[int], coords: Sequence[int]) -> int:
    """Row-major offset of ``coords`` inside a tensor of ``shape``."""
    shape = check_shape(shape)
    if len(coords) != len(shape):
        raise IndexError(f"expected {len(shape)} coordinates, got {len(coords)}")
    offset = 0
    for axis, (c, extent) in enumerate(zip(coords, shape)):
        if not 0 <= c < extent:
            raise IndexError(f"coordinate {c} out of bounds for axis {axis} with extent {extent}")
        offset = offset * extent + int(c)
    return offset


def unravel(shape: Sequence[int], offset: int) -> tuple[int, ...]:
    """Inverse of :func:`linear_index`."""
    shape = check_shape(shape)
    count = element_count(shape)
    if not 0 <= offset < count:
        raise IndexError(f"offset {offset} out of range for {count} elements")
    coords = []
    for extent in reversed(shape):
        offset, c = divmod(offset, extent)
        coords.append(c)
    return tuple(reversed(coords))


def as_tensor(x, dtype=None) -> np.ndarray:
    """Coerce to a C-contiguous float array (float32 unless float64 was given)."""
    arr = np.asarray(x)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else DTYPE
    return np.ascontiguousarray(arr, dtype=dtype)


def set_deterministic(flag: bool) -> None:
    global _deterministic
    _deterministic = bool(flag)


def is_deterministic() -> bool:
    return _deterministic


@contextlib.contextmanager
def deterministic(flag: bool = True):
    prev = _deterministic
    set_deterministic(flag)
    try:
        yield
    finally:
        set_deterministic(prev)


def set_num_threads(n: int) -> None:
    """Configure kernel parallelism.

    ``n == 1`` selects the deterministic GEMM path.  Larger values switch to
    the BLAS path and cap its thread pool at ``n``.
    """
    global _blas_limiter
    if n < 1:
        raise ValueError("thread count must be >= 1")
    from threadpoolctl import threadpool_limits

    if _blas_limiter is not None:
        _blas_limiter.restore_original_limits()
    _blas_limiter = threadpool_limits(limits=n, user_api="blas")
    set_deterministic(n == 1)


def _result_dtype(*arrays):
    return np.float64 if any(a.dtype == np.float64 for a in arrays) else DTYPE


def _fixed_order_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    acc = np.zeros((m, n), dtype=np.float64)
    if m == 1:
        row = acc[0]
        for p in range(k):
            row += a[0, p] * b[p]
        return acc
    for p in range(k):
        acc += np.multiply.outer(a[:, p], b[p])
    return acc


def gemm(a, b, trans_a: bool = False, trans_b: bool = False,
         alpha: float = 1.0, beta: float = 0.0, c=None, deterministic=None) -> np.ndarray:
    """``c <- alpha * op(a) @ op(b) + beta * c``.

    When ``c`` is given it is updated in place and returned; otherwise a new
    matrix is allocated (and ``beta`` is ignored).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm needs matrices, got ranks {a.ndim} and {b.ndim}")
    opa = a.T if trans_a else a
    opb = b.T if trans_b else b
    m, k = opa.shape
    k2, n = opb.shape
    if k != k2:
        raise ShapeError(f"gemm inner dimensions disagree: {opa.shape} x {opb.shape}")
    if c is not None and c.shape != (m, n):
        raise ShapeError(f"gemm output has shape {c.shape}, expected {(m, n)}")
    out_dtype = c.dtype if c is not None else _result_dtype(a, b)

    if alpha == 0.0:
        prod = np.zeros((m, n), dtype=np.float64)
    else:
        a64 = opa.astype(np.float64, copy=False)
        b64 = opb.astype(np.float64, copy=False)
        use_fixed = _deterministic if deterministic is None else deterministic
        prod = _fixed_order_matmul(a64, b64) if use_fixed else a64 @ b64
        if alpha != 1.0:
            prod *= alpha

    if c is None:
        return prod.astype(out_dtype)
    if beta != 0.0:
        prod += beta * c.astype(np.float64)
    c[...] = prod
    return c


def out_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    out = (size + 2 * pad - kernel) // stride + 1
    if size + 2 * pad - kernel < 0 or out < 1:
        raise ShapeError(f"window {kernel} with stride {stride} and pad {pad} "
                         f"does not fit extent {size}")
    return out


def as_pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def im2col_batch(x: np.ndarray, kernel, stride: int, pad: int) -> np.ndarray:
    """Lower a (N, C, H, W) batch to a (C*kh*kw, N*Hout*Wout) matrix.

    Rows are ordered (channel, ki, kj); columns (sample, out_row, out_col).
    """
    kh, kw = as_pair(kernel)
    n, ch, h, w = x.shape
    ho = out_extent(h, kh, stride, pad)
    wo = out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((ch, kh, kw, n, ho, wo), dtype=x.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, :, i:i + hs:stride, j:j + ws:stride].transpose(1, 0, 2, 3)
    return cols.reshape(ch * kh * kw, n * ho * wo)


def col2im_batch(cols: np.ndarray, x_shape, kernel, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col_batch`: scatter-add columns back to an image batch."""
    kh, kw = as_pair(kernel)
    n, ch, h, w = x_shape
    ho = out_extent(h, kh, stride, pad)
    wo = out_extent(w, kw, stride, pad)
    cols = cols.reshape(ch, kh, kw, n, ho, wo)
    out = np.zeros((n, ch, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def im2col(x: np.ndarray, kernel, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower a single (C, H, W) image to a (C*kh*kw, Hout*Wout) matrix."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"im2col expects (C, H, W), got shape {x.shape}")
    return im2col_batch(x[None], kernel, stride, pad)
