import io
import math

import numpy as np
import pytest

from oracles import adam_reference
from seunet.checkpoint import (
    Checkpoint,
    CheckpointError,
    ConfigMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from seunet.data import SamplerConfig, generate_phantom, preprocess_case
from seunet.model import ConfigError, ModelConfig, build_model
from seunet.tensor import Tensor
from seunet.train import (
    OptimizerState,
    TrainState,
    TrainConfig,
    TrainingError,
    adam_step,
    cosine_lr,
    load_params,
    restore_state,
    state_checkpoint,
    train,
)

CFG = TrainConfig()


@pytest.fixture(scope="module")
def cases():
    return [preprocess_case(generate_phantom(s, 16, spacing=(1, 1, 1))) for s in range(3)]


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=2, sampler=SamplerConfig((16, 16, 16)), val_every=0, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule -------------------------------------------------------------------


def test_cosine_examples():
    assert abs(cosine_lr(0, CFG) - 1e-3) < 1e-12
    assert abs(cosine_lr(12.5, CFG) - 5.005e-4) < 1e-12
    assert abs(cosine_lr(25 - 1e-9, CFG) - 1e-6) < 1e-12
    assert abs(cosine_lr(25, CFG) - 1e-3) < 1e-12
    assert abs(cosine_lr(50, CFG) - 1e-3) < 1e-12


def test_cosine_properties():
    ts = np.linspace(0, 100, 4001)
    lrs = np.array([cosine_lr(t, CFG) for t in ts])
    assert lrs.min() >= 1e-6 and lrs.max() <= 1e-3
    within = (ts % 25) < 25 - 1e-9
    steps = np.abs(np.diff(lrs))[within[1:] & (ts[1:] % 25 > 0)]
    assert steps.max() < 2e-6
    for t in np.linspace(0, 24.9, 50):
        assert abs(cosine_lr(t + 25, CFG) - cosine_lr(t, CFG)) < 1e-15
        assert cosine_lr(t + 0.05, CFG) <= cosine_lr(t, CFG)
    with pytest.raises(ValueError):
        cosine_lr(-0.1, CFG)


# -- config --------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(lr_min=1e-3, lr_max=1e-3), dict(cycle_epochs=0), dict(batch_size=0), dict(steps_per_epoch=0), dict(beta1=1.0)],
)
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_train_config_dict_round_trip():
    cfg = small_cfg(lr_max=2e-3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"sampler": {"patch": [16, 16, 16], "ptumor": 0.5}})


def test_epoch_size_is_one_patch_per_case():
    assert TrainConfig(batch_size=2).epoch_steps(5) == 3
    assert TrainConfig(batch_size=1).epoch_steps(5) == 5
    assert TrainConfig(steps_per_epoch=7).epoch_steps(5) == 7


# -- Adam ------------------------------------------------------------------------


def param_set(values):
    return {"w": Tensor(np.array(values, dtype=np.float64), dtype=np.float64)}


def test_adam_zero_gradient():
    params = param_set([1.0, -2.0])
    st = OptimizerState.zeros_like(params)
    adam_step(params, {"w": np.zeros(2)}, st, 1e-3, CFG)
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])
    assert st.step == 1


def test_adam_first_step_is_lr_times_sign():
    params = param_set([0.0, 0.0, 0.0])
    st = OptimizerState.zeros_like(params)
    adam_step(params, {"w": np.array([3.0, -0.25, 1e-3])}, st, 1e-3, CFG)
    np.testing.assert_allclose(params["w"].data, [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=6)
    grads = [rng.normal(size=6) for _ in range(25)]
    lrs = [cosine_lr(k / 5, CFG) for k in range(25)]
    params = param_set(theta)
    st = OptimizerState.zeros_like(params)
    for g, lr in zip(grads, lrs):
        adam_step(params, {"w": g.copy()}, st, lr, CFG)
    np.testing.assert_allclose(params["w"].data, adam_reference(theta, grads, lrs), rtol=0, atol=1e-15)


def test_adam_step_one_scale_equivariance():
    rng = np.random.default_rng(1)
    g = rng.normal(size=8)
    g = np.sign(g) * (np.abs(g) + 1.0) * 100.0  # |g| >= 100 so eps is below 1e-12 relative
    deltas, directions = [], []
    for c in (1.0, 0.5, 7.0, 1e3):
        params = param_set(np.zeros(8))
        st = OptimizerState.zeros_like(params)
        adam_step(params, {"w": c * g}, st, 1e-3, CFG)
        deltas.append(params["w"].data.copy())
        m_hat = st.m["w"] / (1 - CFG.beta1)
        v_hat = st.v["w"] / (1 - CFG.beta2)
        directions.append(m_hat / np.sqrt(v_hat))
    for d in deltas[1:]:
        assert np.abs(d - deltas[0]).max() < 1e-12
    for d in directions[1:]:
        np.testing.assert_allclose(d, directions[0], rtol=1e-15)


def test_adam_errors_name_parameter():
    params = param_set([1.0, 2.0])
    st = OptimizerState.zeros_like(params)
    with pytest.raises(FloatingPointError, match="w"):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, st, 1e-3, CFG)
    with pytest.raises(ValueError, match="w"):
        adam_step(params, {"w": np.zeros(3)}, st, 1e-3, CFG)
    with pytest.raises(KeyError):
        adam_step(params, {"q": np.zeros(2)}, st, 1e-3, CFG)
    assert st.step == 0


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig.tiny()
    params = build_model(cfg, seed=1)
    opt = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(0)
    for k in opt.m:
        opt.m[k] = rng.normal(size=opt.m[k].shape).astype(np.float32)
    opt.step = 17
    ckpt = state_checkpoint(cfg, small_cfg(), TrainState(params, opt, 0.5, 12))
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt", cfg.to_dict())
    assert back.meta == ckpt.meta
    assert list(back.tensors) == list(ckpt.tensors)
    for k in ckpt.tensors:
        assert back.tensors[k].dtype == ckpt.tensors[k].dtype
        np.testing.assert_array_equal(back.tensors[k], ckpt.tensors[k])
    model_cfg, st = restore_state(back)
    assert model_cfg == cfg and st.optimizer.step == 17 and (st.best_dsc, st.best_step) == (0.5, 12)
    loaded, _ = load_params(tmp_path / "a.ckpt")
    assert list(loaded) == list(params)


def test_checkpoint_float64_payload(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4))
    save_checkpoint(Checkpoint({"x": 1}, {"a": arr}), tmp_path / "f.ckpt")
    np.testing.assert_array_equal(load_checkpoint(tmp_path / "f.ckpt").tensors["a"], arr)
    with pytest.raises(CheckpointError):
        save_checkpoint(Checkpoint({}, {"i": np.arange(3)}), tmp_path / "i.ckpt")


def test_corrupt_and_foreign_checkpoints(tmp_path):
    save_checkpoint(Checkpoint({"a": 1}, {"t": np.ones(4, np.float32)}), tmp_path / "c.ckpt")
    raw = bytearray((tmp_path / "c.ckpt").read_bytes())
    raw[40] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all, really not" * 3)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_checkpoint_version_mismatch(tmp_path, monkeypatch):
    import seunet.checkpoint as ck
    monkeypatch.setattr(ck, "VERSION", 2)
    save_checkpoint(Checkpoint({}, {}), tmp_path / "v2.ckpt")
    monkeypatch.setattr(ck, "VERSION", 1)
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(tmp_path / "v2.ckpt")


def test_mismatched_model_config(tmp_path):
    cfg = ModelConfig.tiny()
    params = build_model(cfg)
    save_checkpoint(state_checkpoint(cfg, small_cfg(), TrainState(params, OptimizerState.zeros_like(params))), tmp_path / "m.ckpt")
    other = ModelConfig.tiny(upsampling_paths=2)
    with pytest.raises(ConfigMismatchError) as err:
        load_params(tmp_path / "m.ckpt", other)
    assert err.value.differences == {"upsampling_paths": (3, 2)}


# -- training loop -------------------------------------------------------------------


def test_training_is_deterministic(cases):
    a = train(ModelConfig.tiny(), cases, [], small_cfg())
    b = train(ModelConfig.tiny(), cases, [], small_cfg())
    assert [r.line() for r in a.history] == [r.line() for r in b.history]
    for k in a.state.params:
        np.testing.assert_array_equal(a.state.params[k].data, b.state.params[k].data)


def test_logged_lr_follows_schedule(cases):
    cfg = small_cfg(epochs=4, cycle_epochs=2, lr_min=1e-5)
    buf = io.StringIO()
    result = train(ModelConfig.tiny(), cases, [], cfg, log=buf)
    spe = cfg.epoch_steps(len(cases))
    assert len(result.history) == 4 * spe == len(buf.getvalue().splitlines())
    for line, rec in zip(buf.getvalue().splitlines(), result.history):
        step, ef, lr, dice, focal, total = line.split("\t")
        assert int(step) == rec.step and float(ef) == rec.step / spe
        assert float(lr) == cosine_lr(rec.step / spe, cfg)
        assert float(total) == rec.total


def test_first_step_loss_band(cases):
    result = train(ModelConfig.tiny(), cases, [], small_cfg(epochs=1))
    assert 0.3 <= result.history[0].total <= 1.2


def test_resume_is_bit_identical(cases, tmp_path):
    cfg = small_cfg(epochs=3)
    full = train(ModelConfig.tiny(), cases, [], cfg)
    first = train(ModelConfig.tiny(), cases, [], cfg, out_dir=tmp_path, stop_step=3)
    assert first.state.optimizer.step == 3
    resumed = train(ModelConfig.tiny(), cases, [], cfg, resume=load_checkpoint(tmp_path / "last.ckpt"))
    assert [r.line() for r in first.history + resumed.history] == [r.line() for r in full.history]
    for k in full.state.params:
        np.testing.assert_array_equal(resumed.state.params[k].data, full.state.params[k].data)
        np.testing.assert_array_equal(resumed.state.optimizer.v[k], full.state.optimizer.v[k])


def test_resume_rejects_other_model(cases, tmp_path):
    train(ModelConfig.tiny(), cases, [], small_cfg(epochs=1), out_dir=tmp_path)
    with pytest.raises(ConfigError):
        train(ModelConfig.tiny(upsampling_paths=1), cases, [], small_cfg(), resume=load_checkpoint(tmp_path / "last.ckpt"))


def test_checkpoint_cadence_and_best(cases, tmp_path):
    cfg = small_cfg(epochs=4, checkpoint_every=2, val_every=2)
    result = train(ModelConfig.tiny(), cases[:2], cases[2:], cfg, out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["best.ckpt", "epoch0002.ckpt", "epoch0004.ckpt", "last.ckpt"]
    assert [s for s, _ in result.validation] == [2, 4]
    best = load_checkpoint(tmp_path / "best.ckpt")
    assert best.meta["best_dsc"] == max(d for _, d in result.validation)


def test_non_finite_loss_writes_diagnostic_checkpoint(cases, tmp_path):
    cfg = small_cfg(epochs=1)
    params = build_model(ModelConfig.tiny(), seed=cfg.seed)
    params["head.b"].data[...] = np.nan
    ckpt = state_checkpoint(ModelConfig.tiny(), cfg, TrainState(params, OptimizerState.zeros_like(params)))
    with pytest.raises(TrainingError, match="non-finite loss at step 0"):
        train(ModelConfig.tiny(), cases, [], cfg, out_dir=tmp_path, resume=ckpt)
    diag = load_checkpoint(tmp_path / "diverged.ckpt")
    assert diag.meta["diverged_at"] == 0


def test_training_input_checks(cases):
    with pytest.raises(TrainingError):
        train(ModelConfig.tiny(), [], [], small_cfg())
    raw = generate_phantom(0, 16, spacing=(1, 1, 1))
    with pytest.raises(TrainingError, match="not preprocessed"):
        train(ModelConfig.tiny(), [raw], [], small_cfg())


def test_short_run_lowers_both_loss_terms():
    case = preprocess_case(generate_phantom(0, 16, spacing=(1, 1, 1)))
    cfg = TrainConfig(epochs=30, batch_size=1, sampler=SamplerConfig((16, 16, 16)), val_every=0)
    hist = train(ModelConfig.tiny(), [case], [], cfg).history
    assert all(math.isfinite(h.total) for h in hist)
    assert hist[-1].dice < hist[0].dice
    assert hist[-1].focal < 0.1 * hist[0].focal
