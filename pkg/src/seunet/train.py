"""Training loop: Adam, cosine annealing with warm restarts, validation and checkpoints."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data.sampling import SamplerConfig, sample_patch
from .data.volume import PatientCase, crop_bbox, pet_zscore
from .inference import predict_case, threshold_mask
from .losses import LossConfig, batch_loss_terms, segmentation_metrics
from .model import ConfigError, ModelConfig, build_model, forward
from .tensor import Tensor


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 800
    steps_per_epoch: int | None = None  # None: one patch per training case per epoch
    batch_size: int = 2
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    cycle_epochs: float = 25
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_every: int = 1  # epochs; 0 disables validation
    checkpoint_every: int = 0  # epochs; 0 keeps only last/best
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        if not 0 < self.lr_min < self.lr_max:
            raise ConfigError("need 0 < lr_min < lr_max")
        if self.cycle_epochs < 1:
            raise ConfigError("cycle_epochs must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps be positive")
        if self.val_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("val_every and checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["sampler"] = self.sampler.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        for key, kind in (("loss", LossConfig), ("sampler", SamplerConfig)):
            if key in d and isinstance(d[key], dict):
                extra = set(d[key]) - set(kind.__dataclass_fields__)
                if extra:
                    raise ConfigError(f"unknown {key} config keys: {sorted(extra)}")
                d[key] = kind(**d[key])
        return cls(**d)

    def epoch_steps(self, n_cases: int) -> int:
        return self.steps_per_epoch or max(1, math.ceil(n_cases / self.batch_size))


def cosine_lr(epoch_fraction: float, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_max to lr_min over each cycle, restarting at cycle boundaries."""
    if epoch_fraction < 0:
        raise ValueError("epoch_fraction must be >= 0")
    t = math.fmod(epoch_fraction, cfg.cycle_epochs)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / cfg.cycle_epochs))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> OptimizerState:
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} for {name} differs from parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name].data
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p -= (lr * update).astype(p.dtype)


# -- checkpoints ----------------------------------------------------------


@dataclass
class TrainState:
    params: dict[str, Tensor]
    optimizer: OptimizerState
    best_dsc: float = -1.0
    best_step: int = -1


def state_checkpoint(model_cfg: ModelConfig, cfg: TrainConfig, st: TrainState, **extra) -> Checkpoint:
    meta = {
        "model": model_cfg.to_dict(),
        "train": cfg.to_dict(),
        "step": st.optimizer.step,
        "best_dsc": st.best_dsc,
        "best_step": st.best_step,
        "params": list(st.params),
        **extra,
    }
    tensors = {f"param/{k}": p.data for k, p in st.params.items()}
    tensors.update({f"adam_m/{k}": a for k, a in st.optimizer.m.items()})
    tensors.update({f"adam_v/{k}": a for k, a in st.optimizer.v.items()})
    return Checkpoint(meta, tensors)


def restore_state(ckpt: Checkpoint) -> tuple[ModelConfig, TrainState]:
    model_cfg = ModelConfig.from_dict(ckpt.meta["model"])
    raw = ckpt.group("param")
    order = ckpt.meta.get("params", list(raw))
    params = {k: Tensor(raw[k].copy(), requires_grad=True, dtype=raw[k].dtype) for k in order}
    m, v = ckpt.group("adam_m"), ckpt.group("adam_v")
    opt = OptimizerState({k: m[k].copy() for k in order}, {k: v[k].copy() for k in order}, int(ckpt.meta["step"]))
    return model_cfg, TrainState(params, opt, float(ckpt.meta["best_dsc"]), int(ckpt.meta["best_step"]))


def load_params(path, expected: ModelConfig | None = None) -> tuple[dict[str, Tensor], ModelConfig]:
    """Model parameters from a checkpoint, for inference."""
    ckpt = load_checkpoint(path, None if expected is None else expected.to_dict())
    model_cfg, st = restore_state(ckpt)
    for p in st.params.values():
        p.requires_grad = False
    return st.params, model_cfg


# -- training -------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    epoch_fraction: float
    lr: float
    dice: float
    focal: float
    total: float

    def line(self) -> str:
        return f"{self.step}\t{self.epoch_fraction!r}\t{self.lr!r}\t{self.dice!r}\t{self.focal!r}\t{self.total!r}"


@dataclass
class TrainResult:
    state: TrainState
    history: list[StepRecord]
    validation: list[tuple[int, float]]  # (step, mean DSC)


def _batch(cases: Sequence[PatientCase], cfg: TrainConfig, epoch: int, step_in_epoch: int, dtype):
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(cases))
    pets, cts, labels = [], [], []
    for j in range(cfg.batch_size):
        pos = step_in_epoch * cfg.batch_size + j
        case = cases[order[pos % len(cases)]]
        rng = np.random.default_rng([cfg.seed, epoch, pos])
        pet, ct, label = sample_patch(case, cfg.sampler, rng)
        pets.append(pet_zscore(pet.astype(np.float64)))
        cts.append(ct)
        labels.append(label)
    x = np.stack([np.stack(pets), np.stack(cts)], axis=1).astype(dtype)
    y = np.stack(labels)[:, None].astype(dtype)
    return x, y


def validation_dsc(params, model_cfg: ModelConfig, cases: Sequence[PatientCase]) -> float:
    scores = []
    for case in cases:
        prob = predict_case(params, model_cfg, case)
        gt = crop_bbox(case).gtv
        scores.append(segmentation_metrics(threshold_mask(prob.data), gt.data).dsc)
    return float(np.mean(scores))


def train(
    model_cfg: ModelConfig,
    train_cases: Sequence[PatientCase],
    val_cases: Sequence[PatientCase],
    cfg: TrainConfig,
    *,
    out_dir=None,
    resume: Checkpoint | None = None,
    stop_step: int | None = None,
    log: TextIO | None = None,
) -> TrainResult:
    """Run (or continue) training.

    Batches are drawn from RNGs derived from ``(seed, epoch, slot)``, so a run
    resumed from any checkpoint reproduces the uninterrupted run exactly.
    ``stop_step`` halts early after that many total steps.
    """
    if not train_cases:
        raise TrainingError("training set is empty")
    for case in (*train_cases, *val_cases):
        if not case.ct.normalized:
            raise TrainingError(f"case {case.case_id} is not preprocessed (CT not normalized)")
    crops = [crop_bbox(c) for c in train_cases]
    spe = cfg.epoch_steps(len(crops))
    total_steps = cfg.epochs * spe
    if stop_step is not None:
        total_steps = min(total_steps, stop_step)

    if resume is None:
        params = build_model(model_cfg, seed=cfg.seed)
        st = TrainState(params, OptimizerState.zeros_like(params))
    else:
        ckpt_cfg, st = restore_state(resume)
        if ckpt_cfg != model_cfg:
            raise ConfigError("checkpoint model config differs from the requested model config")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dtype = next(iter(st.params.values())).dtype

    history: list[StepRecord] = []
    validation: list[tuple[int, float]] = []
    while st.optimizer.step < total_steps:
        k = st.optimizer.step
        epoch, within = divmod(k, spe)
        ef = k / spe
        lr = cosine_lr(ef, cfg)
        x, y = _batch(crops, cfg, epoch, within, dtype)
        pred = forward(st.params, model_cfg, Tensor(x, dtype=dtype))
        dice, focal, total = batch_loss_terms(y, pred, cfg.loss)
        if not np.isfinite(total.item()):
            if out is not None:
                save_checkpoint(state_checkpoint(model_cfg, cfg, st, diverged_at=k), out / "diverged.ckpt")
            raise TrainingError(f"non-finite loss at step {k} (epoch fraction {ef:.4f})")
        for p in st.params.values():
            p.zero_grad()
        total.backward()
        grads = {n: p.grad for n, p in st.params.items() if p.grad is not None}
        adam_step(st.params, grads, st.optimizer, lr, cfg)

        rec = StepRecord(k, ef, lr, dice.item(), focal.item(), total.item())
        history.append(rec)
        if log is not None:
            log.write(rec.line() + "\n")
            log.flush()

        if st.optimizer.step % spe == 0:
            done = st.optimizer.step // spe
            if val_cases and cfg.val_every and (done % cfg.val_every == 0 or st.optimizer.step == total_steps):
                score = validation_dsc(st.params, model_cfg, val_cases)
                validation.append((st.optimizer.step, score))
                if score > st.best_dsc:
                    st.best_dsc, st.best_step = score, st.optimizer.step
                    if out is not None:
                        save_checkpoint(state_checkpoint(model_cfg, cfg, st), out / "best.ckpt")
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(state_checkpoint(model_cfg, cfg, st), out / f"epoch{done:04d}.ckpt")

    if out is not None:
        save_checkpoint(state_checkpoint(model_cfg, cfg, st), out / "last.ckpt")
    return TrainResult(st, history, validation)
