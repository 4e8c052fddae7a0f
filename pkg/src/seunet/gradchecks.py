"""Registry of 64-bit finite-difference checks over every differentiable op.

Each entry builds a scalar function of one array from a seeded RNG. The
function contracts the op's output with a fixed random tensor so that all
gradient coordinates are of order one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .gradcheck import gradcheck
from .layers import SEBlockParams, SENormParams, se_block, se_norm
from .losses import LossConfig, focal_loss, soft_dice_loss
from .model import ModelConfig, build_model, forward
from .ops import Conv3dSpec, conv3d, conv3d_transposed, global_avg_pool, linear, maxpool3d, trilinear_resize
from .tensor import Tensor, channel_stats, elementwise, matmul, precision

Case = tuple[Callable[[Tensor], Tensor], np.ndarray, "list[int] | None"]


@dataclass(frozen=True)
class GradcheckEntry:
    name: str
    build: Callable[[np.random.Generator], Case]
    tolerance: float = 1e-6
    h: float = 1e-5


REGISTRY: dict[str, GradcheckEntry] = {}


def register(name: str, tolerance: float = 1e-6, h: float = 1e-5):
    def deco(fn):
        REGISTRY[name] = GradcheckEntry(name, fn, tolerance, h)
        return fn

    return deco


def _contract(y: Tensor, r: np.ndarray) -> Tensor:
    return (y * Tensor(r, dtype=y.dtype)).sum()


def _away_from_zero(rng, shape, lo=0.2, hi=1.5) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _subset(rng, size: int, limit: int = 48) -> list[int] | None:
    return None if size <= limit else sorted(rng.choice(size, limit, replace=False).tolist())


# -- elementwise -------------------------------------------------------------

for _kind in ("add", "sub", "mul"):

    def _binary(rng, kind=_kind):
        shape = (3, 4)
        other = Tensor(rng.normal(size=shape))
        r = rng.normal(size=shape)
        return (lambda x: _contract(elementwise(kind, x, other), r)), rng.normal(size=shape), None

    register(f"elementwise.{_kind}")(_binary)


@register("elementwise.scale")
def _scale(rng):
    r = rng.normal(size=(5,))
    s = float(rng.uniform(-3, 3))
    return (lambda x: _contract(elementwise("scale", x, s), r)), rng.normal(size=(5,)), None


@register("elementwise.clamp")
def _clamp(rng):
    r = rng.normal(size=(12,))
    x = np.concatenate([rng.uniform(-0.8, 0.8, 6), rng.choice([-1, 1], 6) * rng.uniform(1.2, 2.0, 6)])
    return (lambda t: _contract(elementwise("clamp", t, (-1.0, 1.0)), r)), x, None


for _kind in ("relu", "sigmoid", "tanh"):

    def _unary(rng, kind=_kind):
        r = rng.normal(size=(10,))
        return (lambda x: _contract(elementwise(kind, x), r)), _away_from_zero(rng, (10,)), None

    register(f"elementwise.{_kind}")(_unary)


@register("elementwise.ln")
def _ln(rng):
    r = rng.normal(size=(10,))
    return (lambda x: _contract(elementwise("ln", x), r)), rng.uniform(0.3, 3.0, 10), None


@register("elementwise.pow")
def _power(rng):
    r = rng.normal(size=(10,))
    e = float(rng.choice([-1.0, -0.5, 2.0, 3.0]))
    return (lambda x: _contract(elementwise("pow", x, e), r)), rng.uniform(0.5, 2.0, 10), None


# -- linear algebra and reductions ------------------------------------------


@register("matmul")
def _matmul(rng):
    b = Tensor(rng.normal(size=(4, 3)))
    r = rng.normal(size=(5, 3))
    return (lambda x: _contract(matmul(x, b), r)), rng.normal(size=(5, 4)), None


@register("channel_stats")
def _channel_stats(rng):
    x = rng.normal(size=(2, 3, 3, 2, 2))
    rm, rv = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

    def f(t):
        mean, var = channel_stats(t)
        return _contract(mean, rm) + _contract(var, rv)

    return f, x, None


@register("global_avg_pool")
def _gap(rng):
    r = rng.normal(size=(2, 3))
    return (lambda x: _contract(global_avg_pool(x), r)), rng.normal(size=(2, 3, 3, 2, 4)), None


@register("linear")
def _linear(rng):
    w, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3,)))
    r = rng.normal(size=(2, 3))
    return (lambda x: _contract(linear(x, w, b), r)), rng.normal(size=(2, 5)), None


@register("linear.weight")
def _linear_w(rng):
    x, b = Tensor(rng.normal(size=(2, 5))), Tensor(rng.normal(size=(3,)))
    r = rng.normal(size=(2, 3))
    return (lambda w: _contract(linear(x, w, b), r)), rng.normal(size=(3, 5)), None


# -- volumetric ---------------------------------------------------------------


def _random_conv_spec(rng) -> tuple[Conv3dSpec, tuple[int, int, int]]:
    k = int(rng.choice([1, 2, 3]))
    s = int(rng.choice([1, 2]))
    p = int(rng.integers(0, k))
    size = tuple(int(n) for n in rng.integers(k + 1, k + 4, size=3))
    return Conv3dSpec(int(rng.integers(1, 4)), int(rng.integers(1, 4)), k, s, p), size


@register("conv3d")
def _conv(rng):
    spec, size = _random_conv_spec(rng)
    x = rng.normal(size=(1, spec.in_channels, *size))
    w = Tensor(rng.normal(size=(spec.out_channels, spec.in_channels, *spec.kernel)))
    b = Tensor(rng.normal(size=(spec.out_channels,)))
    r = rng.normal(size=(1, spec.out_channels, *spec.output_extent(size)))
    return (lambda t: _contract(conv3d(t, w, b, spec), r)), x, _subset(rng, x.size)


@register("conv3d.weight")
def _conv_w(rng):
    spec, size = _random_conv_spec(rng)
    x = Tensor(rng.normal(size=(1, spec.in_channels, *size)))
    b = Tensor(rng.normal(size=(spec.out_channels,)))
    r = rng.normal(size=(1, spec.out_channels, *spec.output_extent(size)))
    w = rng.normal(size=(spec.out_channels, spec.in_channels, *spec.kernel))
    return (lambda t: _contract(conv3d(x, t, b, spec), r)), w, _subset(rng, w.size)


def _transposed_setup(rng):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spec = Conv3dSpec.doubling(cin, cout)
    size = tuple(int(n) for n in rng.integers(1, 4, size=3))
    r = rng.normal(size=(1, cout, *spec.transposed_extent(size)))
    return spec, size, r


@register("conv3d_transposed")
def _convt(rng):
    spec, size, r = _transposed_setup(rng)
    w = Tensor(rng.normal(size=(spec.in_channels, spec.out_channels, 3, 3, 3)))
    b = Tensor(rng.normal(size=(spec.out_channels,)))
    x = rng.normal(size=(1, spec.in_channels, *size))
    return (lambda t: _contract(conv3d_transposed(t, w, b, spec), r)), x, _subset(rng, x.size)


@register("conv3d_transposed.weight")
def _convt_w(rng):
    spec, size, r = _transposed_setup(rng)
    x = Tensor(rng.normal(size=(1, spec.in_channels, *size)))
    b = Tensor(rng.normal(size=(spec.out_channels,)))
    w = rng.normal(size=(spec.in_channels, spec.out_channels, 3, 3, 3))
    return (lambda t: _contract(conv3d_transposed(x, t, b, spec), r)), w, _subset(rng, w.size)


@register("maxpool3d")
def _maxpool(rng):
    shape = (1, 2, 4, 2, 4)
    # distinct values at least 0.01 apart so no window has a near tie
    x = rng.permutation(np.prod(shape)).reshape(shape) * 0.01 + rng.uniform(0, 0.001)
    r = rng.normal(size=(1, 2, 2, 1, 2))
    return (lambda t: _contract(maxpool3d(t), r)), x, None


@register("trilinear_resize")
def _resize(rng):
    size_in = tuple(int(n) for n in rng.integers(1, 5, size=3))
    size_out = tuple(int(n) for n in rng.integers(1, 7, size=3))
    r = rng.normal(size=(1, 2, *size_out))
    return (lambda t: _contract(trilinear_resize(t, size_out), r)), rng.normal(size=(1, 2, *size_in)), None


# -- SE normalization ---------------------------------------------------------


def _random_se(rng, channels: int, activation: str, reduction: int = 2) -> SEBlockParams:
    hidden = channels // reduction
    return SEBlockParams(
        Tensor(rng.normal(size=(hidden, channels))),
        Tensor(rng.uniform(0.1, 0.5, size=(hidden,))),
        Tensor(rng.normal(size=(channels, hidden))),
        Tensor(rng.normal(size=(channels,))),
        activation,
    )


@register("se_block")
def _se_block(rng):
    act = str(rng.choice(["sigmoid", "tanh"]))
    p = _random_se(rng, 4, act)
    r = rng.normal(size=(2, 4))
    return (lambda x: _contract(se_block(x, p), r)), rng.normal(size=(2, 4, 2, 3, 2)), None


@register("se_norm")
def _se_norm(rng):
    p = SENormParams(_random_se(rng, 4, "sigmoid"), _random_se(rng, 4, "tanh"))
    r = rng.normal(size=(1, 4, 3, 2, 3))
    return (lambda x: _contract(se_norm(x, p), r)), rng.normal(size=(1, 4, 3, 2, 3)), None


# -- losses ---------------------------------------------------------------------


@register("soft_dice_loss")
def _dice(rng):
    y = (rng.random((2, 3, 4)) < 0.4).astype(np.float64)
    return (lambda p: soft_dice_loss(y, p)), rng.uniform(0.05, 0.95, (2, 3, 4)), None


@register("focal_loss")
def _focal(rng):
    y = (rng.random((2, 3, 4)) < 0.5).astype(np.float64)
    cfg = LossConfig(focal_symmetric=bool(rng.integers(2)))
    return (lambda p: focal_loss(y, p, cfg)), rng.uniform(0.05, 0.95, (2, 3, 4)), None


# -- whole network ------------------------------------------------------------


def _tiny_network(rng, wrt: str):
    cfg = ModelConfig.tiny()
    params = build_model(cfg, seed=int(rng.integers(2**31)), dtype=np.float64)
    for name, p in params.items():
        # replace the zero-initialized SE output layers so every path carries gradient
        if ".fc2." in name:
            p.data[...] = rng.normal(scale=0.5, size=p.shape)
    x = rng.normal(size=(1, 2, 16, 16, 16))
    r = rng.normal(size=(1, 1, 16, 16, 16))
    if wrt == "input":
        return (lambda t: _contract(forward(params, cfg, t), r)), x, _subset(rng, x.size, 12)
    key = "encoder.level0.res0.branch.conv1.w"
    target = params[key].data.copy()
    xt = Tensor(x)

    def f(w):
        local = dict(params)
        local[key] = w
        return _contract(forward(local, cfg, xt), r)

    return f, target, _subset(rng, target.size, 12)


register("network.input", tolerance=1e-3, h=1e-6)(lambda rng: _tiny_network(rng, "input"))
register("network.stem_weight", tolerance=1e-3, h=1e-6)(lambda rng: _tiny_network(rng, "weight"))


# -- driver ---------------------------------------------------------------------


@dataclass
class GradcheckResult:
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def run_gradchecks(names: Iterable[str] | None = None, seeds: Iterable[int] = range(20)) -> list[GradcheckResult]:
    selected = list(REGISTRY) if names is None else list(names)
    unknown = [n for n in selected if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown gradcheck entries: {unknown}")
    seeds = list(seeds)
    results = []
    with precision(np.float64):
        for name in selected:
            entry = REGISTRY[name]
            for seed in seeds:
                f, x, coords = entry.build(np.random.default_rng([seed, len(name)] + list(name.encode())))
                err = gradcheck(f, np.asarray(x, dtype=np.float64), h=entry.h, coords=coords)
                results.append(GradcheckResult(name, seed, err, entry.tolerance))
    return results
