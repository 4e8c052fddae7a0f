import numpy as np
import pytest

from seunet.gradcheck import gradcheck
from seunet.layers import (
    ConvBlockParams,
    ResBlockParams,
    ResBlockSpec,
    SEBlockParams,
    SENormParams,
    conv_block,
    init_conv_block,
    init_res_block,
    init_se_block,
    normalize,
    res_block,
    se_block,
    se_norm,
)
from seunet.ops import conv3d
from seunet.tensor import ShapeError, Tensor, relu


def zero_se(channels, activation, r=2):
    h = channels // r
    return SEBlockParams(Tensor(np.zeros((h, channels))), Tensor(np.zeros(h)), Tensor(np.zeros((channels, h))), Tensor(np.zeros(channels)), activation)


def random_se(rng, channels, activation, scale=2.0):
    h = channels // 2
    return SEBlockParams(
        Tensor(rng.normal(scale=scale, size=(h, channels))),
        Tensor(rng.normal(size=h)),
        Tensor(rng.normal(scale=scale, size=(channels, h))),
        Tensor(rng.normal(size=channels)),
        activation,
    )


def zero_norm(channels):
    return SENormParams(zero_se(channels, "sigmoid"), zero_se(channels, "tanh"))


def test_zero_se_blocks(f64, rng):
    x = Tensor(rng.normal(size=(2, 4, 2, 3, 2)))
    np.testing.assert_array_equal(se_block(x, zero_se(4, "sigmoid")).data, 0.5)
    np.testing.assert_array_equal(se_block(x, zero_se(4, "tanh")).data, 0.0)


def test_se_block_hand_composition(f64):
    p = SEBlockParams(Tensor([[1.0, 0.0]]), Tensor([0.0]), Tensor([[1.0], [0.0]]), Tensor([0.0, 0.0]), "sigmoid")
    x = np.empty((1, 2, 1, 1, 2))
    x[0, 0] = 2.0
    x[0, 1] = 5.0
    out = se_block(Tensor(x), p).data
    np.testing.assert_allclose(out, [[1 / (1 + np.exp(-2.0)), 0.5]], rtol=1e-15)


def test_se_block_ranges(f64, rng):
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(scale=3, size=(3, 6, 2, 2, 2)))
        g = se_block(x, random_se(r, 6, "sigmoid", 0.7)).data
        b = se_block(x, random_se(r, 6, "tanh", 0.7)).data
        assert np.all((g > 0) & (g < 1))
        assert np.all((b > -1) & (b < 1))


def test_se_block_hidden_width_is_half():
    params = {}
    init_se_block(params, "se", 8, 2, np.random.default_rng(0), np.float32)
    assert params["se.fc1.w"].shape == (4, 8) and params["se.fc2.w"].shape == (8, 4)
    with pytest.raises(ValueError):
        init_se_block({}, "se", 5, 2, np.random.default_rng(0), np.float32)


def test_se_block_channel_mismatch():
    with pytest.raises(ShapeError):
        se_block(Tensor(np.ones((1, 3, 2, 2, 2))), zero_se(4, "sigmoid"))


def test_se_norm_constant_channel_gives_beta(f64, rng):
    x = np.full((1, 2, 2, 2, 2), 3.0)
    p = SENormParams(random_se(rng, 2, "sigmoid"), random_se(rng, 2, "tanh"))
    beta = se_block(Tensor(x), p.beta_block).data
    np.testing.assert_allclose(se_norm(Tensor(x), p).data, np.broadcast_to(beta[..., None, None, None], x.shape), atol=0)


def test_se_norm_two_values(f64):
    x = np.array([1.0, 3.0]).reshape(1, 1, 2, 1, 1)
    xn = normalize(Tensor(x), 1e-5).data.ravel()
    np.testing.assert_allclose(xn, [-1, 1], atol=1e-5)
    p = SENormParams(zero_se(2, "sigmoid"), zero_se(2, "tanh"))
    x2 = np.concatenate([x, x], axis=1)
    np.testing.assert_allclose(se_norm(Tensor(x2), p).data.ravel(), 0.5 * np.concatenate([xn, xn]), rtol=1e-15)


def test_se_norm_statistics(rng):
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(loc=r.uniform(-5, 5), scale=r.uniform(0.5, 4), size=(2, 4, 5, 4, 6)))
        xn = normalize(x, 1e-5).data.astype(np.float64)
        assert np.abs(xn.mean(axis=(2, 3, 4))).max() < 1e-5
        assert np.abs(xn.std(axis=(2, 3, 4)) - 1).max() < 1e-3


def test_se_norm_affine_invariance_with_constant_gamma_beta(rng):
    x = rng.normal(size=(1, 4, 4, 4, 4)).astype(np.float32)
    p = zero_norm(4)
    a = np.array([0.5, 2.0, 7.0, 1.3], dtype=np.float32)[None, :, None, None, None]
    b = np.array([-3.0, 0.0, 10.0, 1.0], dtype=np.float32)[None, :, None, None, None]
    np.testing.assert_allclose(se_norm(Tensor(a * x + b), p).data, se_norm(Tensor(x), p).data, atol=2e-3)


def test_se_norm_gradcheck(f64, rng):
    p = SENormParams(random_se(rng, 4, "sigmoid", 1.0), random_se(rng, 4, "tanh", 1.0))
    r = rng.normal(size=(1, 4, 3, 2, 2))
    assert gradcheck(lambda t: (se_norm(t, p) * Tensor(r)).sum(), rng.normal(size=(1, 4, 3, 2, 2)), h=1e-5) < 1e-6


def test_conv_block_zero_weights_give_beta(f64, rng):
    params = {}
    init_conv_block(params, "blk", 2, 4, 3, rng, dtype=np.float64)
    params["blk.w"].data[...] = 0
    out = conv_block(Tensor(rng.normal(size=(1, 2, 4, 4, 4))), ConvBlockParams.from_params(params, "blk"))
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_block_composition_and_order(f64, rng):
    params = {}
    init_conv_block(params, "blk", 2, 4, 3, rng, dtype=np.float64)
    for k in ("blk.norm.gamma.fc2.w", "blk.norm.beta.fc2.w"):
        params[k].data[...] = rng.normal(size=params[k].shape)
    x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)))
    p = ConvBlockParams.from_params(params, "blk")
    manual = se_norm(relu(conv3d(x, params["blk.w"], params["blk.b"])), p.norm)
    out = conv_block(x, p)
    assert out.shape == (1, 4, 4, 4, 4)
    np.testing.assert_array_equal(out.data, manual.data)
    swapped = conv_block(x, ConvBlockParams.from_params(params, "blk", order="conv_norm_relu"))
    np.testing.assert_array_equal(swapped.data, relu(se_norm(conv3d(x, params["blk.w"], params["blk.b"]), p.norm)).data)


def test_res_block_identity_and_projection(f64, rng):
    params = {}
    init_res_block(params, "same", ResBlockSpec(4, 4), rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 4, 4, 4, 4)))
    p = ResBlockParams.from_params(params, "same")
    assert p.shortcut is None
    branch = conv_block(conv_block(x, p.branch[0]), p.branch[1])
    out = res_block(x, p)
    np.testing.assert_array_equal(out.data, (branch + x).data)
    np.testing.assert_allclose(out.data - branch.data, x.data, atol=1e-15)

    init_res_block(params, "proj", ResBlockSpec(4, 8), rng, dtype=np.float64)
    p = ResBlockParams.from_params(params, "proj")
    assert p.shortcut is not None and p.shortcut.w.shape == (8, 4, 1, 1, 1)
    out = res_block(x, p)
    manual = conv_block(conv_block(x, p.branch[0]), p.branch[1]) + conv_block(x, p.shortcut)
    assert out.shape == (1, 8, 4, 4, 4)
    np.testing.assert_array_equal(out.data, manual.data)


def test_res_block_spec_projection_flag():
    assert ResBlockSpec(2, 4).projection and not ResBlockSpec(4, 4).projection
    with pytest.raises(ValueError):
        ResBlockSpec(4, 4, projection=True)
