"""Differentiable 3-D network kernels on [N, C, D, H, W] tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .tensor import ShapeError, Tensor, as_tensor, broadcast_to, matmul, transpose


@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (1, 1, 1)
    has_bias: bool = True
    output_padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "output_padding"):
            object.__setattr__(self, name, K.triple(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise ValueError(f"invalid convolution geometry {self}")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int = 3, has_bias: bool = True) -> Conv3dSpec:
        """Stride-1 spec whose padding preserves spatial extent (odd kernels)."""
        if kernel % 2 == 0:
            raise ValueError("shape-preserving convolution needs an odd kernel")
        return cls(in_channels, out_channels, (kernel,) * 3, (1, 1, 1), (kernel // 2,) * 3, has_bias)

    @classmethod
    def doubling(cls, in_channels: int, out_channels: int) -> Conv3dSpec:
        """Transposed-convolution setting that exactly doubles each extent."""
        return cls(in_channels, out_channels, (3, 3, 3), (2, 2, 2), (1, 1, 1), True, (1, 1, 1))

    def output_extent(self, size) -> tuple[int, int, int]:
        out = K.conv_output_extent(tuple(size), self.kernel, self.stride, self.padding)
        if min(out) < 1:
            raise ShapeError(f"convolution output extent {out} < 1 for input {tuple(size)} and {self}")
        return out

    def transposed_extent(self, size) -> tuple[int, int, int]:
        out = tuple(
            (n - 1) * s - 2 * p + k + op
            for n, s, p, k, op in zip(size, self.stride, self.padding, self.kernel, self.output_padding)
        )
        if min(out) < 1:
            raise ShapeError(f"transposed convolution output extent {out} is not positive")
        return out  # type: ignore[return-value]


def _check_rank5(x: Tensor, op: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{op} expects [N,C,D,H,W], got shape {x.shape}")


def _infer_spec(w: Tensor, b, stride, padding) -> Conv3dSpec:
    kernel = w.shape[2:]
    if padding is None:
        padding = tuple(k // 2 for k in kernel)
    return Conv3dSpec(w.shape[1], w.shape[0], kernel, stride, padding, b is not None)


def conv3d(x, w, b=None, spec: Conv3dSpec | None = None, *, stride=1, padding=None) -> Tensor:
    """Zero-padded 3-D cross-correlation; ``w`` is [Cout, Cin, kd, kh, kw]."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_rank5(x, "conv3d")
    if spec is None:
        spec = _infer_spec(w, b, stride, padding)
    if x.shape[1] != spec.in_channels or w.shape[:2] != (spec.out_channels, spec.in_channels):
        raise ShapeError(f"conv3d channel mismatch: input {x.shape}, weight {w.shape}, spec {spec}")
    if w.shape[2:] != spec.kernel:
        raise ShapeError(f"conv3d kernel {w.shape[2:]} does not match spec {spec.kernel}")
    spec.output_extent(x.shape[2:])

    out = K.conv3d_forward(x.data, w.data, spec.stride, spec.padding)
    if b is not None:
        out += b.data[None, :, None, None, None]

    def backward(g):
        dx = K.conv3d_grad_input(g, w.data, x.shape[2:], spec.stride, spec.padding) if x.requires_grad else None
        dw = K.conv3d_grad_weight(x.data, g, spec.kernel, spec.stride, spec.padding) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, backward, "conv3d")


def conv3d_naive(x, w, b=None, spec: Conv3dSpec | None = None, *, stride=1, padding=None) -> Tensor:
    """Nested-loop float64 oracle with the same contract as :func:`conv3d` (no gradient)."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_rank5(x, "conv3d_naive")
    if spec is None:
        spec = _infer_spec(w, b, stride, padding)
    if x.shape[1] != spec.in_channels or w.shape[:2] != (spec.out_channels, spec.in_channels):
        raise ShapeError(f"conv3d channel mismatch: input {x.shape}, weight {w.shape}, spec {spec}")
    spec.output_extent(x.shape[2:])
    out = K.conv3d_naive(x.data, w.data, None if b is None else b.data, spec.stride, spec.padding)
    return Tensor(out, dtype=np.float64)


def conv3d_transposed(x, w, b=None, spec: Conv3dSpec | None = None) -> Tensor:
    """Adjoint of :func:`conv3d`; ``w`` is [Cin, Cout, kd, kh, kw].

    The default spec (kernel 3, stride 2, pad 1, output padding 1) doubles
    every spatial extent.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_rank5(x, "conv3d_transposed")
    if spec is None:
        spec = Conv3dSpec.doubling(w.shape[0], w.shape[1])
    if x.shape[1] != spec.in_channels or w.shape[:2] != (spec.in_channels, spec.out_channels):
        raise ShapeError(f"conv3d_transposed channel mismatch: input {x.shape}, weight {w.shape}, spec {spec}")
    if any(op >= s for op, s in zip(spec.output_padding, spec.stride)):
        raise ValueError("output_padding must be smaller than stride")
    extent = spec.transposed_extent(x.shape[2:])

    out = K.conv3d_grad_input(x.data, w.data, extent, spec.stride, spec.padding)
    if b is not None:
        out += b.data[None, :, None, None, None]

    def backward(g):
        dx = K.conv3d_forward(g, w.data, spec.stride, spec.padding) if x.requires_grad else None
        dw = K.conv3d_grad_weight(g, x.data, spec.kernel, spec.stride, spec.padding) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, backward, "conv3d_transposed")


def maxpool3d(x) -> Tensor:
    """2x2x2 max pooling with stride 2; ties resolve to the first element in scan order."""
    x = as_tensor(x)
    _check_rank5(x, "maxpool3d")
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool3d needs even spatial extents, got {(d, h, w)}")
    blocks = x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, d // 2, h // 2, w // 2, 8)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(g.shape + (8,), dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (routed.reshape(x.shape),)

    return Tensor._result(out, (x,), backward, "maxpool3d")


def interpolation_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners linear interpolation: left index, right index, right weight."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interpolation extents must be >= 1, got {n_in} -> {n_out}")
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    left = np.minimum(np.floor(src).astype(np.int64), max(n_in - 2, 0))
    right = np.minimum(left + 1, n_in - 1)
    frac = src - left
    return left, right, frac


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    left, right, frac = interpolation_weights(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, left), 1 - frac)
    np.add.at(m, (rows, right), frac)
    return m


def resize_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    """Linear align-corners resampling of a numpy array along one axis."""
    n_in = a.shape[axis]
    if n_in == n_out:
        return a.copy()
    left, right, frac = interpolation_weights(n_in, n_out)
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.astype(a.dtype).reshape(shape)
    return np.take(a, left, axis=axis) * (1 - frac) + np.take(a, right, axis=axis) * frac


def trilinear_resize(x, size) -> Tensor:
    """Resize the spatial axes of [N,C,D,H,W] to ``size`` with align-corners trilinear sampling."""
    x = as_tensor(x)
    _check_rank5(x, "trilinear_resize")
    size = K.triple(size)
    if min(size) < 1:
        raise ShapeError(f"target extents must be >= 1, got {size}")
    out = x.data
    for axis, n in zip((2, 3, 4), size):
        out = resize_axis(out, axis, n)

    def backward(g):
        for axis, n_in in zip((2, 3, 4), x.shape[2:]):
            if g.shape[axis] == n_in:
                continue
            m = interpolation_matrix(n_in, g.shape[axis]).astype(g.dtype)
            g = np.moveaxis(np.tensordot(g, m, axes=([axis], [0])), -1, axis)
        return (g,)

    return Tensor._result(np.ascontiguousarray(out), (x,), backward, "trilinear_resize")


def global_avg_pool(x) -> Tensor:
    """Mean over all spatial positions: [N,C,D,H,W] -> [N,C]."""
    x = as_tensor(x)
    _check_rank5(x, "global_avg_pool")
    return x.mean(axis=(2, 3, 4))


def linear(x, w, b=None) -> Tensor:
    """Fully connected layer ``x @ w.T + b`` with ``w`` of shape [G, F]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = matmul(x, transpose(w))
    if b is None:
        return out
    b = as_tensor(b)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return out + broadcast_to(b, out.shape)
