"""Squeeze-and-excitation normalization and the blocks built from it.

Parameters live in a flat ``{name: Tensor}`` mapping; the dataclasses here
are lightweight views that resolve one layer's tensors by name prefix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import MutableMapping

import numpy as np

from .ops import conv3d, global_avg_pool, linear
from .tensor import ShapeError, Tensor, broadcast_to, channel_stats, concat, relu, reshape, sigmoid, tanh

Params = MutableMapping[str, Tensor]

BLOCK_ORDERS = ("conv_relu_norm", "conv_norm_relu")
NORM_KINDS = ("se", "instance")


@dataclass
class SEBlockParams:
    w1: Tensor  # [C/r, C]
    b1: Tensor
    w2: Tensor  # [C, C/r]
    b2: Tensor
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.activation not in ("sigmoid", "tanh"):
            raise ValueError(f"SE block activation must be sigmoid or tanh, not {self.activation!r}")
        hidden, channels = self.w1.shape
        if self.w2.shape != (channels, hidden) or self.b1.shape != (hidden,) or self.b2.shape != (channels,):
            raise ShapeError(f"inconsistent SE block shapes: w1 {self.w1.shape}, w2 {self.w2.shape}")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def from_params(cls, params: Params, prefix: str, activation: str) -> SEBlockParams:
        return cls(
            params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"], params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"], activation
        )


@dataclass
class SENormParams:
    gamma_block: SEBlockParams
    beta_block: SEBlockParams
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.gamma_block.channels != self.beta_block.channels:
            raise ShapeError("gamma and beta SE blocks disagree on channel count")

    @classmethod
    def from_params(cls, params: Params, prefix: str, epsilon: float = 1e-5) -> SENormParams:
        return cls(
            SEBlockParams.from_params(params, f"{prefix}.gamma", "sigmoid"),
            SEBlockParams.from_params(params, f"{prefix}.beta", "tanh"),
            epsilon,
        )


@dataclass
class InstanceNormParams:
    """Plain instance normalization with learned per-channel scale and shift (ablation baseline)."""

    scale: Tensor
    shift: Tensor
    epsilon: float = 1e-5

    @classmethod
    def from_params(cls, params: Params, prefix: str, epsilon: float = 1e-5) -> InstanceNormParams:
        return cls(params[f"{prefix}.scale"], params[f"{prefix}.shift"], epsilon)


@dataclass
class ConvBlockParams:
    w: Tensor
    b: Tensor | None
    norm: SENormParams | InstanceNormParams
    order: str = "conv_relu_norm"

    @classmethod
    def from_params(
        cls, params: Params, prefix: str, norm: str = "se", order: str = "conv_relu_norm", epsilon: float = 1e-5
    ) -> ConvBlockParams:
        if norm == "se":
            norm_params = SENormParams.from_params(params, f"{prefix}.norm", epsilon)
        else:
            norm_params = InstanceNormParams.from_params(params, f"{prefix}.norm", epsilon)
        return cls(params[f"{prefix}.w"], params.get(f"{prefix}.b"), norm_params, order)


@dataclass
class ResBlockSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    projection: bool | None = None

    def __post_init__(self):
        needed = self.in_channels != self.out_channels
        if self.projection is None:
            self.projection = needed
        elif self.projection != needed:
            raise ValueError("a projection shortcut is used exactly when channel counts differ")


@dataclass
class ResBlockParams:
    branch: list[ConvBlockParams]
    shortcut: ConvBlockParams | None

    @classmethod
    def from_params(cls, params: Params, prefix: str, n_convs: int = 2, **kw) -> ResBlockParams:
        branch = [ConvBlockParams.from_params(params, f"{prefix}.branch.conv{i + 1}", **kw) for i in range(n_convs)]
        shortcut = None
        if f"{prefix}.shortcut.w" in params:
            shortcut = ConvBlockParams.from_params(params, f"{prefix}.shortcut", **kw)
        return cls(branch, shortcut)


def _expand(t: Tensor, like: Tensor) -> Tensor:
    """[N,C] (or [C]) -> broadcast over the spatial axes of ``like``."""
    if t.ndim == 1:
        t = reshape(t, (1, t.shape[0], 1, 1, 1))
    else:
        t = reshape(t, t.shape + (1, 1, 1))
    return broadcast_to(t, like.shape)


def se_block(x: Tensor, p: SEBlockParams) -> Tensor:
    """Squeeze (global average pool) and excite (FC-ReLU-FC-activation): [N,C,...] -> [N,C]."""
    if x.ndim != 5 or x.shape[1] != p.channels:
        raise ShapeError(f"se_block: input {x.shape} does not have {p.channels} channels")
    squeezed = global_avg_pool(x)
    hidden = relu(linear(squeezed, p.w1, p.b1))
    z = linear(hidden, p.w2, p.b2)
    return sigmoid(z) if p.activation == "sigmoid" else tanh(z)


def normalize(x: Tensor, epsilon: float) -> Tensor:
    """Per-(sample, channel) standardization (x - mean) / sqrt(var + eps)."""
    mean, var = channel_stats(x)
    inv_std = (var + epsilon) ** -0.5
    return (x - _expand(mean, x)) * _expand(inv_std, x)


def se_norm(x: Tensor, p: SENormParams) -> Tensor:
    """Instance-style normalization with input-dependent scale and shift.

    Both SE blocks read the raw layer input ``x``; the scale block ends in a
    sigmoid and the shift block in a tanh so shifts can be negative.
    """
    if x.ndim != 5 or x.shape[1] != p.gamma_block.channels:
        raise ShapeError(f"se_norm: input {x.shape} does not have {p.gamma_block.channels} channels")
    gamma = se_block(x, p.gamma_block)
    beta = se_block(x, p.beta_block)
    return _expand(gamma, x) * normalize(x, p.epsilon) + _expand(beta, x)


def instance_norm(x: Tensor, p: InstanceNormParams) -> Tensor:
    return _expand(p.scale, x) * normalize(x, p.epsilon) + _expand(p.shift, x)


def _norm(x: Tensor, p) -> Tensor:
    return se_norm(x, p) if isinstance(p, SENormParams) else instance_norm(x, p)


def conv_block(x: Tensor, p: ConvBlockParams) -> Tensor:
    """Shape-preserving convolution, ReLU and normalization.

    ``order="conv_relu_norm"`` (default) applies ReLU before the norm layer;
    ``"conv_norm_relu"`` swaps them.
    """
    y = conv3d(x, p.w, p.b)
    if p.order == "conv_relu_norm":
        return _norm(relu(y), p.norm)
    if p.order == "conv_norm_relu":
        return relu(_norm(y, p.norm))
    raise ValueError(f"unknown block order {p.order!r}")


def res_block(x: Tensor, p: ResBlockParams) -> Tensor:
    """Stacked conv blocks plus an identity or 1x1x1 conv-block shortcut."""
    y = x
    for block in p.branch:
        y = conv_block(y, block)
    shortcut = x if p.shortcut is None else conv_block(x, p.shortcut)
    if shortcut.shape != y.shape:
        raise ShapeError(f"res_block: branch {y.shape} and shortcut {shortcut.shape} cannot be added")
    return y + shortcut


# -- initialization -------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def init_se_block(params: Params, prefix: str, channels: int, reduction: int, rng, dtype) -> None:
    if reduction < 1 or channels % reduction:
        raise ValueError(f"channel count {channels} is not divisible by reduction ratio {reduction}")
    hidden = channels // reduction
    params[f"{prefix}.fc1.w"] = _uniform(rng, (hidden, channels), 1.0 / np.sqrt(channels), dtype)
    params[f"{prefix}.fc1.b"] = _zeros((hidden,), dtype)
    # zero last layer: the block starts at sigmoid(0)=0.5 / tanh(0)=0
    params[f"{prefix}.fc2.w"] = _zeros((channels, hidden), dtype)
    params[f"{prefix}.fc2.b"] = _zeros((channels,), dtype)


def init_conv_block(
    params: Params,
    prefix: str,
    in_channels: int,
    out_channels: int,
    kernel: int,
    rng: np.random.Generator,
    *,
    reduction: int = 2,
    norm: str = "se",
    dtype=None,
) -> None:
    fan_in = in_channels * kernel**3
    params[f"{prefix}.w"] = _uniform(rng, (out_channels, in_channels, kernel, kernel, kernel), np.sqrt(6.0 / fan_in), dtype)
    params[f"{prefix}.b"] = _zeros((out_channels,), dtype)
    if norm == "se":
        init_se_block(params, f"{prefix}.norm.gamma", out_channels, reduction, rng, dtype)
        init_se_block(params, f"{prefix}.norm.beta", out_channels, reduction, rng, dtype)
    elif norm == "instance":
        params[f"{prefix}.norm.scale"] = Tensor(np.ones(out_channels), requires_grad=True, dtype=dtype)
        params[f"{prefix}.norm.shift"] = _zeros((out_channels,), dtype)
    else:
        raise ValueError(f"unknown norm kind {norm!r}")


def init_res_block(params: Params, prefix: str, spec: ResBlockSpec, rng, *, n_convs: int = 2, **kw) -> None:
    cin = spec.in_channels
    for i in range(n_convs):
        init_conv_block(params, f"{prefix}.branch.conv{i + 1}", cin, spec.out_channels, spec.kernel, rng, **kw)
        cin = spec.out_channels
    if spec.projection:
        init_conv_block(params, f"{prefix}.shortcut", spec.in_channels, spec.out_channels, 1, rng, **kw)


def channel_concat(tensors) -> Tensor:
    return concat(tensors, axis=1)
