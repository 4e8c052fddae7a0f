"""Residual U-Net with SE normalization for two-channel PET/CT volumes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (
    BLOCK_ORDERS,
    NORM_KINDS,
    ConvBlockParams,
    Params,
    ResBlockParams,
    ResBlockSpec,
    channel_concat,
    conv_block,
    init_conv_block,
    init_res_block,
    res_block,
)
from .ops import conv3d, conv3d_transposed, maxpool3d, trilinear_resize
from .tensor import ShapeError, Tensor, get_default_dtype, sigmoid


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass
class ModelConfig:
    in_channels: int = 2
    widths: tuple[int, ...] = (32, 64, 128, 256, 512)
    levels: int = 4
    stem_kernel: int = 7
    out_channels: int = 1
    reduction: int = 2
    epsilon: float = 1e-5
    res_blocks: int = 2  # per encoder level; the first one changes width
    convs_per_block: int = 2
    upsampling_paths: int = 3
    norm: str = "se"
    block_order: str = "conv_relu_norm"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self) -> None:
        if len(self.widths) != self.levels + 1:
            raise ConfigError(f"need {self.levels + 1} widths for {self.levels} levels, got {self.widths}")
        if self.levels < 0 or min(self.widths) < 1:
            raise ConfigError("levels must be >= 0 and widths positive")
        if self.stem_kernel % 2 == 0:
            raise ConfigError("stem kernel must be odd")
        if self.res_blocks < 1 or self.convs_per_block < 1:
            raise ConfigError("need at least one residual block and one conv per block")
        if not 0 <= self.upsampling_paths <= max(self.levels - 1, 0):
            raise ConfigError(f"at most {max(self.levels - 1, 0)} upsampling paths fit {self.levels} levels")
        if self.norm not in NORM_KINDS:
            raise ConfigError(f"norm must be one of {NORM_KINDS}")
        if self.block_order not in BLOCK_ORDERS:
            raise ConfigError(f"block_order must be one of {BLOCK_ORDERS}")
        if any(w % self.reduction for w in self.widths) and self.norm == "se":
            raise ConfigError(f"widths {self.widths} must be divisible by reduction ratio {self.reduction}")

    @property
    def divisor(self) -> int:
        return 2**self.levels

    @property
    def path_levels(self) -> list[int]:
        """Decoder levels feeding an upsampling path, lowest resolution first."""
        return list(range(self.levels - 1, self.levels - 1 - self.upsampling_paths, -1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides) -> ModelConfig:
        base = dict(widths=(4, 8, 16, 32, 64))
        base.update(overrides)
        return cls(**base)


def _block_kw(cfg: ModelConfig) -> dict:
    return dict(norm=cfg.norm, order=cfg.block_order, epsilon=cfg.epsilon)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=None) -> dict[str, Tensor]:
    """Create the named parameter set, deterministic for a given seed."""
    cfg.validate()
    dtype = np.dtype(dtype or get_default_dtype())
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    init = dict(reduction=cfg.reduction, norm=cfg.norm, dtype=dtype)
    w = cfg.widths

    for level in range(cfg.levels + 1):
        cin = cfg.in_channels if level == 0 else w[level - 1]
        for r in range(cfg.res_blocks):
            kernel = cfg.stem_kernel if (level == 0 and r == 0) else 3
            spec = ResBlockSpec(cin if r == 0 else w[level], w[level], kernel)
            init_res_block(params, f"encoder.level{level}.res{r}", spec, rng, n_convs=cfg.convs_per_block, **init)

    for level in range(cfg.levels - 1, -1, -1):
        fan_in = w[level + 1] * 27
        bound = np.sqrt(6.0 / fan_in)
        params[f"decoder.level{level}.up.w"] = Tensor(
            rng.uniform(-bound, bound, (w[level + 1], w[level], 3, 3, 3)), requires_grad=True, dtype=dtype
        )
        params[f"decoder.level{level}.up.b"] = Tensor(np.zeros(w[level]), requires_grad=True, dtype=dtype)
        init_conv_block(params, f"decoder.level{level}.conv1", 2 * w[level], w[level], 3, rng, **init)
        init_conv_block(params, f"decoder.level{level}.conv2", w[level], w[level], 3, rng, **init)

    for level in cfg.path_levels:
        init_conv_block(params, f"paths.level{level}", w[level], w[0], 1, rng, **init)

    bound = np.sqrt(6.0 / w[0])
    params["head.w"] = Tensor(rng.uniform(-bound, bound, (cfg.out_channels, w[0], 1, 1, 1)), requires_grad=True, dtype=dtype)
    params["head.b"] = Tensor(np.zeros(cfg.out_channels), requires_grad=True, dtype=dtype)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(t.size for t in params.values()))


def stem_kernel_of(params: dict[str, Tensor]) -> tuple[int, ...]:
    return params["encoder.level0.res0.branch.conv1.w"].shape[2:]


def check_input(cfg: ModelConfig, shape) -> None:
    if len(shape) != 5 or shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input [N,{cfg.in_channels},D,H,W], got {tuple(shape)}")
    bad = [n for n in shape[2:] if n % cfg.divisor]
    if bad:
        raise ShapeError(
            f"spatial extents {tuple(shape[2:])} must be divisible by {cfg.divisor}; "
            f"pad the input to the next multiple of {cfg.divisor}"
        )


def forward(params: dict[str, Tensor], cfg: ModelConfig, x: Tensor, return_logits: bool = False) -> Tensor:
    """Map [N, 2, D, H, W] PET/CT to [N, 1, D, H, W] tumour probabilities."""
    check_input(cfg, x.shape)
    kw = _block_kw(cfg)
    full = x.shape[2:]

    skips = []
    h = x
    for level in range(cfg.levels + 1):
        if level > 0:
            h = maxpool3d(h)
        for r in range(cfg.res_blocks):
            block = ResBlockParams.from_params(params, f"encoder.level{level}.res{r}", cfg.convs_per_block, **kw)
            h = res_block(h, block)
        expected = tuple(n // 2**level for n in full)
        if h.shape[2:] != expected:
            raise AssertionError(f"encoder level {level} has extent {h.shape[2:]}, expected {expected}")
        skips.append(h)

    decoded = {}
    for level in range(cfg.levels - 1, -1, -1):
        up = conv3d_transposed(h, params[f"decoder.level{level}.up.w"], params[f"decoder.level{level}.up.b"])
        h = channel_concat([up, skips[level]])
        h = conv_block(h, ConvBlockParams.from_params(params, f"decoder.level{level}.conv1", **kw))
        h = conv_block(h, ConvBlockParams.from_params(params, f"decoder.level{level}.conv2", **kw))
        decoded[level] = h

    for level in cfg.path_levels:
        side = conv_block(decoded[level], ConvBlockParams.from_params(params, f"paths.level{level}", **kw))
        h = h + trilinear_resize(side, full)

    logits = conv3d(h, params["head.w"], params["head.b"])
    return logits if return_logits else sigmoid(logits)
