"""Dense tensor kernels.

Every kernel is a pure function of its arguments. Accumulation happens in a
fixed order (tensordot over fixed axes, scatter loops over kernel offsets in
row-major order) so identical inputs give bit-identical outputs. Nothing is
broadcast implicitly: mismatched ranks, axes or dtypes raise DimensionError.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.helpers.constants import DTYPES
from src.helpers.model import ConfigurationError, DimensionError
from src.models.tensors import PoolIndexCache, Tensor


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ConfigurationError(f"unknown precision '{precision}' (use f32 or f64)")


def _check_rank(op: str, name: str, array: Tensor, rank: int) -> None:
    if array.ndim != rank:
        raise DimensionError(op, f"{name}.rank", rank, array.ndim)


def _check_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(op, "dtype", str(a.dtype), str(b.dtype))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(op: str, x: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    if stride < 1:
        raise ConfigurationError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"{op}: padding must be >= 0, got {padding}")
    _, _, height, width = x.shape
    if kernel > height + 2 * padding:
        raise DimensionError(op, "H", f">= {kernel - 2 * padding}", height)
    if kernel > width + 2 * padding:
        raise DimensionError(op, "W", f">= {kernel - 2 * padding}", width)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N,C,H,W batch with an O,C,k,k kernel."""
    op = "conv2d"
    _check_rank(op, "input", input, 4)
    _check_rank(op, "kernel", kernel, 4)
    _check_dtype(op, input, kernel)
    if input.shape[1] != kernel.shape[1]:
        raise DimensionError(op, "C", kernel.shape[1], input.shape[1])
    if kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(op, "kernel.k", kernel.shape[2], kernel.shape[3])

    windows = _windows(op, input, kernel.shape[2], stride, padding)
    out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_transpose(
    grad_or_signal: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    output_size: tuple[int, int] | None = None,
) -> Tensor:
    """Adjoint of `conv2d` under the same stride and padding.

    `output_size` picks the H,W of the result when the forward pass floored
    away trailing rows/columns; by default the smallest consistent size is used.
    """
    op = "conv2d_transpose"
    _check_rank(op, "input", grad_or_signal, 4)
    _check_rank(op, "kernel", kernel, 4)
    _check_dtype(op, grad_or_signal, kernel)
    batch, out_channels, out_h, out_w = grad_or_signal.shape
    if out_channels != kernel.shape[0]:
        raise DimensionError(op, "O", kernel.shape[0], out_channels)
    if stride < 1:
        raise ConfigurationError(f"{op}: stride must be >= 1, got {stride}")
    in_channels, k = kernel.shape[1], kernel.shape[2]

    if output_size is None:
        height = (out_h - 1) * stride + k - 2 * padding
        width = (out_w - 1) * stride + k - 2 * padding
    else:
        height, width = output_size
        if conv_output_size(height, k, stride, padding) != out_h:
            raise DimensionError(op, "H", conv_output_size(height, k, stride, padding), out_h)
        if conv_output_size(width, k, stride, padding) != out_w:
            raise DimensionError(op, "W", conv_output_size(width, k, stride, padding), out_w)

    columns = np.tensordot(grad_or_signal, kernel, axes=([1], [0]))  # N,Ho,Wo,C,k,k
    padded = np.zeros(
        (batch, in_channels, height + 2 * padding, width + 2 * padding),
        dtype=grad_or_signal.dtype,
    )
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            padded[:, :, i : i + row_span : stride, j : j + col_span : stride] += columns[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(padded[:, :, padding : padding + height, padding : padding + width])


def conv2d_kernel_grad(
    input: Tensor, grad_output: Tensor, kernel_size: int, stride: int = 1, padding: int = 0
) -> Tensor:
    """Gradient of <conv2d(input, w), grad_output> with respect to w."""
    op = "conv2d_kernel_grad"
    _check_rank(op, "input", input, 4)
    _check_rank(op, "grad_output", grad_output, 4)
    _check_dtype(op, input, grad_output)
    if input.shape[0] != grad_output.shape[0]:
        raise DimensionError(op, "N", input.shape[0], grad_output.shape[0])

    windows = _windows(op, input, kernel_size, stride, padding)
    if windows.shape[2:4] != grad_output.shape[2:4]:
        raise DimensionError(op, "H'xW'", windows.shape[2:4], grad_output.shape[2:4])
    return np.tensordot(grad_output, windows, axes=([0, 2, 3], [0, 2, 3]))


def maxpool(input: Tensor, window: int = 2, stride: int | None = None) -> tuple[Tensor, PoolIndexCache]:
    """Per-window maximum plus the argmax cache; ties go to the lowest flat index."""
    op = "maxpool"
    _check_rank(op, "input", input, 4)
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ConfigurationError(f"{op}: window and stride must be >= 1")
    batch, channels, height, width = input.shape
    if height < window or (height - window) % stride:
        raise DimensionError(op, "H", f"window {window} / stride {stride} tiling", height)
    if width < window or (width - window) % stride:
        raise DimensionError(op, "W", f"window {window} / stride {stride} tiling", width)

    view = sliding_window_view(input, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = view.shape[2], view.shape[3]
    flat = view.reshape(batch, channels, out_h, out_w, window * window)
    winner = flat.argmax(axis=-1)
    values = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    rows = np.arange(out_h)[:, None] * stride + winner // window
    cols = np.arange(out_w)[None, :] * stride + winner % window
    indices = (rows * width + cols).astype(np.int64)
    cache = PoolIndexCache(
        indices=indices,
        input_shape=(batch, channels, height, width),
        window=window,
        stride=stride,
    )
    return np.ascontiguousarray(values), cache


def pool_gather(input: Tensor, cache: PoolIndexCache) -> Tensor:
    """Apply the selection a max-pool cache recorded to another tensor."""
    if tuple(input.shape) != cache.input_shape:
        raise DimensionError("pool_gather", "input", cache.input_shape, tuple(input.shape))
    batch, channels, height, width = cache.input_shape
    flat = input.reshape(batch, channels, height * width)
    picked = np.take_along_axis(flat, cache.indices.reshape(batch, channels, -1), axis=2)
    return picked.reshape(cache.indices.shape)


def unpool(input: Tensor, cache: PoolIndexCache, output_shape: tuple[int, ...] | None = None) -> Tensor:
    """Scatter pooled values back to their argmax positions (adjoint of pool_gather)."""
    op = "unpool"
    if tuple(input.shape) != cache.output_shape:
        raise DimensionError(op, "pooled", cache.output_shape, tuple(input.shape))
    if output_shape is not None and tuple(output_shape) != cache.input_shape:
        raise DimensionError(op, "output", cache.input_shape, tuple(output_shape))
    batch, channels, height, width = cache.input_shape
    plane = height * width
    offsets = np.arange(batch * channels, dtype=np.int64)[:, None] * plane + cache.indices.reshape(
        batch * channels, -1
    )
    scattered = np.bincount(
        offsets.ravel(),
        weights=input.reshape(-1).astype(np.float64),
        minlength=batch * channels * plane,
    )
    return scattered.astype(input.dtype).reshape(cache.input_shape)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """Matrix product (or matrix-vector product when `b` is 1-D)."""
    op = "matmul"
    _check_rank(op, "a", a, 2)
    if b.ndim not in (1, 2):
        raise DimensionError(op, "b.rank", "1 or 2", b.ndim)
    _check_dtype(op, a, b)
    left = a.T if transpose_a else a
    right = b.T if (transpose_b and b.ndim == 2) else b
    if left.shape[1] != right.shape[0]:
        raise DimensionError(op, "inner", left.shape[1], right.shape[0])
    return left @ right


def matvec(a: Tensor, v: Tensor, transpose_a: bool = False) -> Tensor:
    _check_rank("matvec", "v", v, 1)
    return matmul(a, v, transpose_a=transpose_a)


def inner(a: Tensor, b: Tensor) -> float:
    """<a, b> accumulated in float64."""
    if a.shape != b.shape:
        raise DimensionError("inner", "shape", a.shape, b.shape)
    return float(np.dot(a.reshape(-1).astype(np.float64), b.reshape(-1).astype(np.float64)))


def hard_sigmoid(z: Tensor) -> Tensor:
    return np.clip(z, 0.0, 1.0)


def hard_sigmoid_mask(z: Tensor) -> Tensor:
    # closed clamp: zero derivative on and beyond the boundaries
    return ((z > 0.0) & (z < 1.0)).astype(z.dtype)


def relu(z: Tensor) -> Tensor:
    return np.maximum(z, 0.0)


def relu_mask(z: Tensor) -> Tensor:
    return (z > 0.0).astype(z.dtype)


ACTIVATIONS = {
    "hard_sigmoid": (hard_sigmoid, hard_sigmoid_mask),
    "relu": (relu, relu_mask),
}


def kaiming_uniform(
    shape: tuple[int, ...],
    fan_in: int,
    rng: np.random.Generator,
    scale: float = 1.0,
    dtype: np.dtype = np.dtype("float32"),
) -> Tensor:
    """Uniform Kaiming init with the a=sqrt(5) gain, optionally scaled."""
    bound = scale * np.sqrt(6.0 / ((1.0 + 5.0) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
