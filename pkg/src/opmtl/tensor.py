"""Dense row-major tensors and the numerical kernels everything else builds on.

Tensors are immutable after construction: the underlying buffer is marked
read-only and updates always produce a new ``Tensor``.  All kernels use a
fixed accumulation order so results are reproducible bit-for-bit for a given
dtype and input.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, DTypeError

SUPPORTED_DTYPES = ("float32", "float64")


class Tensor:
    """Dense, row-major, finite-valued multidimensional array.

    Wraps a C-contiguous numpy buffer.  Construction validates rank >= 1,
    positive extents, a supported float dtype and finiteness of every entry.
    """

    __slots__ = ("data",)

    def __init__(self, values, dtype: str | None = None):
        if dtype is not None and dtype not in SUPPORTED_DTYPES:
            raise DTypeError(f"unsupported dtype {dtype!r}; expected one of {SUPPORTED_DTYPES}")
        arr = np.array(values, dtype=dtype, order="C", copy=True)
        if dtype is None:
            if arr.dtype.name not in SUPPORTED_DTYPES:
                arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(e < 1 for e in arr.shape):
            raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (NaN/Inf rejected)")
        arr.flags.writeable = False
        self.data = arr

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return self.data.dtype.name

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def tolist(self):
        return self.data.tolist()

    def copy(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor(self.data.reshape(tuple(shape)), dtype=self.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def allclose(self, other: "Tensor", rtol: float = 1e-5, atol: float = 1e-8) -> bool:
        return self.shape == other.shape and np.allclose(self.data, other.data, rtol=rtol, atol=atol)

    def bit_equal(self, other: "Tensor") -> bool:
        return (
            self.shape == other.shape
            and self.dtype == other.dtype
            and self.data.tobytes() == other.data.tobytes()
        )


def _require_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise DTypeError(f"{op}: dtype mismatch ({a.dtype} vs {b.dtype})")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (m x p) and b (p x n).

    Accumulates strictly left to right over the inner axis, so the result is
    bit-identical to a naive triple loop regardless of the BLAS backend or
    thread count.
    """
    if a.rank != 2 or b.rank != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    _require_same_dtype(a, b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    av, bv = a.data, b.data
    acc = av[:, 0:1] * bv[0:1, :]
    for k in range(1, av.shape[1]):
        acc = acc + av[:, k : k + 1] * bv[k : k + 1, :]
    return Tensor(acc, dtype=a.dtype)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes and dtypes must match exactly."""
    _require_same_dtype(a, b, "hadamard")
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shape mismatch, {a.shape} vs {b.shape}")
    return Tensor(a.data * b.data, dtype=a.dtype)


def permute_axes(x: Tensor, order: Iterable[int]) -> Tensor:
    """Materialized copy of x with axes reordered by the given permutation."""
    order = tuple(order)
    if sorted(order) != list(range(x.rank)):
        raise ValueError(f"order {order} is not a permutation of 0..{x.rank - 1}")
    return Tensor(np.ascontiguousarray(np.transpose(x.data, order)), dtype=x.dtype)


# -- convolution ---------------------------------------------------------


def conv_output_extent(extent: int, k: int, stride: int, padding: int) -> int:
    num = extent + 2 * padding - k
    if num < 0 or num % stride != 0:
        raise DimensionError(
            f"non-integral conv output extent: (({extent} + 2*{padding} - {k}) / {stride}) + 1"
        )
    return num // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold (b, c, H, W) into columns of shape (b, c*k*k, H'*W')."""
    b, c, h, w = x.shape
    ho = conv_output_extent(h, k, stride, padding)
    wo = conv_output_extent(w, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        return x.reshape(b, c, h * w)
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]  # (b, c, ho, wo, k, k)
    return windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)


def conv2d_forward_cols(
    x: np.ndarray, w: np.ndarray, stride: int, padding: int
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlation plus the im2col buffer, for reuse in backward."""
    b, ci, h, width = x.shape
    co, ci_w, k, k2 = w.shape
    if k != k2:
        raise DimensionError(f"conv2d: kernel must be square, got {w.shape}")
    if ci != ci_w:
        raise DimensionError(f"conv2d: channel mismatch, input has {ci}, kernel expects {ci_w}")
    ho = conv_output_extent(h, k, stride, padding)
    wo = conv_output_extent(width, k, stride, padding)
    cols = im2col(x, k, stride, padding)  # (b, ci*k*k, ho*wo)
    wmat = w.reshape(co, ci * k * k)
    out = np.matmul(wmat, cols)  # (b, co, ho*wo)
    return out.reshape(b, co, ho, wo), cols


def conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation on raw arrays; x is (b, c_i, H, W), w is (c_o, c_i, k, k)."""
    return conv2d_forward_cols(x, w, stride, padding)[0]


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding."""
    if x.rank != 4 or w.rank != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    _require_same_dtype(x, w, "conv2d")
    return Tensor(conv2d_raw(x.data, w.data, stride, padding), dtype=x.dtype)


def dilate_rows_cols(y: np.ndarray, stride: int) -> np.ndarray:
    """Insert stride-1 zeros between spatial entries of (b, c, H, W)."""
    if stride == 1:
        return y
    b, c, h, w = y.shape
    out = np.zeros((b, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=y.dtype)
    out[:, :, ::stride, ::stride] = y
    return out


def conv2d_backward_raw(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray, stride: int, padding: int,
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dx, dw) of conv2d_raw for upstream gradient dy.

    ``cols`` may pass the im2col buffer cached by conv2d_forward_cols.
    """
    b, ci, h, width = x.shape
    co, _, k, _ = w.shape
    # dw: correlate input windows with dy.
    if cols is None:
        cols = im2col(x, k, stride, padding)  # (b, ci*k*k, ho*wo)
    dy_mat = dy.reshape(b, co, -1)  # (b, co, ho*wo)
    dw = np.tensordot(dy_mat, cols, axes=((0, 2), (0, 2))).reshape(co, ci, k, k)
    # dx: full correlation of the dilated dy with the flipped, channel-swapped kernel.
    if k == 1 and stride == 1 and padding == 0:
        wmat = w.reshape(co, ci)
        return np.matmul(wmat.T, dy_mat).reshape(b, ci, h, width), dw
    dy_dil = dilate_rows_cols(dy, stride)
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))  # (ci, co, k, k)
    dx_full = conv2d_raw(dy_dil, w_flip, stride=1, padding=k - 1)
    # Crop padding and any right/bottom slack from non-covering strides.
    dx = dx_full[:, :, padding : padding + h, padding : padding + width]
    pad_h = h - dx.shape[2]
    pad_w = width - dx.shape[3]
    if pad_h or pad_w:
        dx = np.pad(dx, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    return np.ascontiguousarray(dx), dw
