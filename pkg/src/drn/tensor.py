"""Dense NCHW kernels with hand-written adjoints.

Every activation and gradient in the package is a rank-4 ``numpy.ndarray``
laid out as (batch, channels, rows, cols) in either float32 or float64.
The functions here are pure: they never mutate their inputs, and each
``*_backward`` is the exact adjoint of its forward counterpart.

Convolutions always reduce in float64 and round once to the input dtype,
so single-precision results do not depend on summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_AXES = ("n", "c", "h", "w")
_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class TensorShapeError(ValueError):
    """Operand shapes disagree; ``axis`` names the offending dimension."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class DTypeMismatchError(TypeError):
    pass


class ChannelDivisibilityError(TensorShapeError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if (self.kernel, self.padding) not in (((1, 1), 0), ((3, 3), 1)) or self.stride != 1:
            raise ValueError(
                f"unsupported conv configuration kernel={self.kernel} "
                f"padding={self.padding} stride={self.stride}; "
                "only 1x1/pad 0 and 3x3/pad 1 with stride 1 are implemented"
            )

    @classmethod
    def for_kernel(cls, k: int) -> "ConvSpec":
        return cls(kernel=(k, k), padding=k // 2)


def check_tensor(x: np.ndarray, name: str = "tensor") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise TensorShapeError(f"{name} must be a rank-4 ndarray, got {getattr(x, 'shape', type(x))}")
    if x.dtype not in _SUPPORTED_DTYPES:
        raise DTypeMismatchError(f"{name} has unsupported dtype {x.dtype}")
    for axis, size in zip(_AXES, x.shape):
        if size < 1:
            raise TensorShapeError(f"{name} has empty axis {axis}", axis=axis)


def _same_dtype(*arrays: np.ndarray) -> np.dtype:
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) != 1:
        raise DTypeMismatchError(f"mixed dtypes in one operation: {sorted(map(str, dtypes))}")
    return arrays[0].dtype


def _require_axis(a_shape, b_shape, axes, what):
    for axis in axes:
        i = _AXES.index(axis)
        if a_shape[i] != b_shape[i]:
            raise TensorShapeError(
                f"{what}: axis {axis} mismatch ({a_shape[i]} vs {b_shape[i]})", axis=axis
            )


# ---------------------------------------------------------------- convolution


def _columns(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """(n, c, h, w) -> (n, c*kh*kw, h*w) float64 patch matrix, rows ordered
    (channel, kernel row, kernel col) to match ``weight.reshape(c_out, -1)``."""
    n, c, h, w = x.shape
    if kh == 1 and kw == 1:
        return x.astype(np.float64).reshape(n, c, h * w)
    cols = np.zeros((n, c, kh, kw, h, w))
    for r in range(kh):
        dy = r - pad
        dst_y, src_y = slice(max(0, -dy), h - max(0, dy)), slice(max(0, dy), h + min(0, dy))
        for s in range(kw):
            dx = s - pad
            dst_x, src_x = slice(max(0, -dx), w - max(0, dx)), slice(max(0, dx), w + min(0, dx))
            cols[:, :, r, s, dst_y, dst_x] = x[:, :, src_y, src_x]
    return cols.reshape(n, c * kh * kw, h * w)


def _check_conv(x, weight, spec):
    check_tensor(x, "input")
    if weight.ndim != 4:
        raise TensorShapeError(f"weight must be rank 4, got shape {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise TensorShapeError(
            f"conv: input has {x.shape[1]} channels but weight expects {weight.shape[1]}", axis="c"
        )
    if tuple(weight.shape[2:]) != spec.kernel:
        raise TensorShapeError(f"conv: weight kernel {weight.shape[2:]} does not match spec {spec.kernel}")


def conv2d_forward(x, weight, bias, spec: ConvSpec | None = None) -> np.ndarray:
    """Same-size cross-correlation with zero padding.

    ``out[n,o,y,x] = bias[o] + sum_{i,r,s} x[n,i,y+r-p,x+s-p] * weight[o,i,r,s]``
    """
    return conv2d_forward_cached(x, weight, bias, spec)[0]


def conv2d_forward_cached(x, weight, bias, spec: ConvSpec | None = None):
    """:func:`conv2d_forward` that also returns the patch matrix, which
    :func:`conv2d_backward` accepts as ``columns`` to skip rebuilding it."""
    spec = spec or ConvSpec.for_kernel(weight.shape[-1])
    _check_conv(x, weight, spec)
    dtype = _same_dtype(x, weight, bias)
    if bias.shape != (weight.shape[0],):
        raise TensorShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)", axis="c")
    n, _, h, w = x.shape
    c_out = weight.shape[0]
    cols = _columns(x, *spec.kernel, spec.padding)
    out = np.matmul(weight.reshape(c_out, -1).astype(np.float64), cols)
    out += bias.astype(np.float64)[:, None]
    return out.reshape(n, c_out, h, w).astype(dtype), cols


def conv2d_backward(grad_out, x, weight, spec: ConvSpec | None = None, columns=None):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    spec = spec or ConvSpec.for_kernel(weight.shape[-1])
    _check_conv(x, weight, spec)
    dtype = _same_dtype(grad_out, x, weight)
    n, c_in, h, w = x.shape
    c_out = weight.shape[0]
    expected = (n, c_out, h, w)
    if grad_out.shape != expected:
        for axis, a, b in zip(_AXES, grad_out.shape, expected):
            if a != b:
                raise TensorShapeError(
                    f"grad_out shape {grad_out.shape} != forward output {expected}", axis=axis
                )
    g = grad_out.astype(np.float64).reshape(n, c_out, h * w)
    cols = _columns(x, *spec.kernel, spec.padding) if columns is None else columns
    grad_w = np.zeros((c_out, cols.shape[1]))
    for i in range(n):
        grad_w += g[i] @ cols[i].T
    grad_b = g.sum(axis=(0, 2))

    # adjoint of a stride-1 "same" correlation: correlate with the flipped,
    # channel-transposed kernel
    w64 = weight.astype(np.float64)
    if spec.kernel == (1, 1):
        gx = np.matmul(w64.reshape(c_out, c_in).T, g)
    else:
        flipped = w64[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
        gx = np.matmul(flipped, _columns(grad_out, *spec.kernel, spec.padding))
    grad_in = gx.reshape(n, c_in, h, w)
    return grad_in.astype(dtype), grad_w.reshape(weight.shape).astype(dtype), grad_b.astype(dtype)


# ---------------------------------------------------------------- activation


def elu_forward(x: np.ndarray, alpha: float) -> np.ndarray:
    if alpha <= 0:
        raise ValueError(f"ELU alpha must be positive, got {alpha}")
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0))).astype(x.dtype, copy=False)


def elu_backward(grad_out: np.ndarray, x: np.ndarray, alpha: float) -> np.ndarray:
    _same_dtype(grad_out, x)
    if grad_out.shape != x.shape:
        raise TensorShapeError(f"elu_backward: {grad_out.shape} vs {x.shape}")
    slope = np.where(x > 0, 1.0, alpha * np.exp(np.minimum(x, 0)))
    return (grad_out * slope).astype(x.dtype, copy=False)


# ---------------------------------------------------------------- sub-pixel


def pixel_shuffle(x: np.ndarray, m: int) -> np.ndarray:
    """Move ``m*m`` channel groups into an ``m``-times larger spatial grid.

    Channel ``o*m*m + dy*m + dx`` of the input feeds output channel ``o`` at
    sub-pixel offset (dy, dx).
    """
    check_tensor(x, "input")
    n, c, h, w = x.shape
    if m < 1 or c % (m * m):
        raise ChannelDivisibilityError(f"{c} channels not divisible by {m}^2", axis="c")
    co = c // (m * m)
    return x.reshape(n, co, m, m, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * m, w * m)


def pixel_unshuffle(y: np.ndarray, m: int) -> np.ndarray:
    check_tensor(y, "input")
    n, c, hm, wm = y.shape
    if m < 1 or hm % m or wm % m:
        axis = "h" if hm % m else "w"
        raise TensorShapeError(f"spatial size {(hm, wm)} not divisible by {m}", axis=axis)
    h, w = hm // m, wm // m
    return y.reshape(n, c, h, m, w, m).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * m * m, h, w)


# backward of each is the opposite data movement
pixel_shuffle_backward = pixel_unshuffle
pixel_unshuffle_backward = pixel_shuffle


# ---------------------------------------------------------------- channel routing


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    _same_dtype(a, b)
    _require_axis(a.shape, b.shape, ("n", "h", "w"), "concat")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, c_first: int) -> tuple[np.ndarray, np.ndarray]:
    check_tensor(x, "input")
    if not 0 < c_first < x.shape[1]:
        raise TensorShapeError(f"split point {c_first} outside (0, {x.shape[1]})", axis="c")
    return x[:, :c_first].copy(), x[:, c_first:].copy()


def concat_backward(grad_out: np.ndarray, c_first: int) -> tuple[np.ndarray, np.ndarray]:
    return split_channels(grad_out, c_first)


def split_backward(grad_first: np.ndarray, grad_second: np.ndarray) -> np.ndarray:
    return concat_channels(grad_first, grad_second)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    _same_dtype(a, b)
    if a.shape != b.shape:
        for axis, p, q in zip(_AXES, a.shape, b.shape):
            if p != q:
                raise TensorShapeError(f"add: axis {axis} mismatch ({p} vs {q})", axis=axis)
    return a + b


def add_backward(grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad_out, grad_out


# ---------------------------------------------------------------- dihedral group


def dihedral(x: np.ndarray, k: int) -> np.ndarray:
    """Apply the k-th of the 8 square symmetries (k//4 flips, k%4 quarter turns)
    to the trailing two axes."""
    out = np.rot90(x, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def dihedral_inverse(x: np.ndarray, k: int) -> np.ndarray:
    out = x[..., ::-1] if k >= 4 else x
    return np.ascontiguousarray(np.rot90(out, -(k % 4), axes=(-2, -1)))
