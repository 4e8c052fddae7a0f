"""Bounding-box inference, model ensembling, cross-validation splits and evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Mapping, Sequence, TextIO

import numpy as np

from .data.sampling import PAD_VALUES
from .data.volume import PatientCase, Volume, crop_bbox, pet_zscore
from .losses import AggregateMetrics, MetricsReport, aggregate_metrics, segmentation_metrics, write_records
from .model import ModelConfig, forward
from .tensor import Tensor, no_grad


@dataclass
class EnsembleConfig:
    checkpoints: list[str] = field(default_factory=list)
    threshold: float = 0.5
    combine: str = "mean"  # "mean" of probabilities, or "logit_mean"

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.combine not in ("mean", "logit_mean"):
            raise ValueError(f"unknown combine mode {self.combine!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _param_dtype(params: Mapping[str, Tensor]) -> np.dtype:
    return next(iter(params.values())).dtype


def _run(params, cfg: ModelConfig, pet: np.ndarray, ct: np.ndarray) -> np.ndarray:
    x = np.stack([pet, ct])[None].astype(_param_dtype(params))
    with no_grad():
        return forward(params, cfg, Tensor(x, dtype=x.dtype)).data[0, 0]


def _pad_sym(a: np.ndarray, shape, value) -> tuple[np.ndarray, tuple[slice, ...]]:
    pads = [((p - n) // 2, (p - n) - (p - n) // 2) for n, p in zip(a.shape, shape)]
    inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, a.shape))
    if not any(lo or hi for lo, hi in pads):
        return a, inner
    return np.pad(a, pads, constant_values=value), inner


def _window_starts(n: int, window: int, stride: int) -> list[int]:
    if n <= window:
        return [0]
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def predict_array(
    params,
    cfg: ModelConfig,
    pet: np.ndarray,
    ct: np.ndarray,
    *,
    extra_pad: int = 0,
    max_voxels: int | None = None,
    window: int = 144,
    stride: int = 96,
) -> np.ndarray:
    """Tumour probabilities for a preprocessed, PET-standardized crop.

    The crop is padded symmetrically to the next multiple of the network's
    divisor (plus ``extra_pad`` divisor multiples per axis) and the padding
    removed from the output. When the padded crop exceeds ``max_voxels`` it
    is processed in overlapping windows whose probabilities are averaged.
    """
    div = cfg.divisor
    target = tuple(-(-n // div) * div + extra_pad * div for n in pet.shape)
    pet_p, inner = _pad_sym(pet, target, PAD_VALUES["pet"])
    ct_p, _ = _pad_sym(ct, target, PAD_VALUES["ct"])

    if max_voxels is None or int(np.prod(target)) <= max_voxels:
        return _run(params, cfg, pet_p, ct_p)[inner]

    if window % div or stride < 1:
        raise ValueError(f"window {window} must be a multiple of {div} and stride positive")
    win = tuple(min(window, n) for n in target)
    acc = np.zeros(target, dtype=np.float64)
    hits = np.zeros(target, dtype=np.float64)
    for origin in product(*(_window_starts(n, w, stride) for n, w in zip(target, win))):
        sl = tuple(slice(o, o + w) for o, w in zip(origin, win))
        acc[sl] += _run(params, cfg, pet_p[sl], ct_p[sl])
        hits[sl] += 1.0
    return (acc / hits).astype(_param_dtype(params))[inner]


def predict_case(params, cfg: ModelConfig, case: PatientCase, **kw) -> Volume:
    """Probability map over the case's bounding-box crop."""
    crop = crop_bbox(case)
    pet = pet_zscore(crop.pet.data.astype(np.float32))
    ct = crop.ct.data.astype(np.float32)
    prob = predict_array(params, cfg, pet, ct, **kw)
    return Volume(prob, crop.ct.spacing, crop.ct.origin, "PROB")


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return np.log(p) - np.log1p(-p)


def combine_probabilities(maps: Sequence[np.ndarray], combine: str = "mean") -> np.ndarray:
    """Voxelwise mean of member probability maps.

    Members are sorted per voxel before a float64 summation, so the result
    does not depend on member order, and a mean of identical maps returns
    that map exactly.
    """
    if not maps:
        raise ValueError("need at least one member prediction")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError(f"member output shapes differ: {[m.shape for m in maps]}")
    out_dtype = np.result_type(*maps)
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    if combine == "logit_mean":
        stack = _logit(stack)
    elif combine != "mean":
        raise ValueError(f"unknown combine mode {combine!r}")
    stack.sort(axis=0)
    mean = stack.sum(axis=0) / len(maps)
    if combine == "logit_mean":
        mean = 1.0 / (1.0 + np.exp(-mean))
    return mean.astype(out_dtype)


def threshold_mask(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (prob >= threshold).astype(np.uint8)


def ensemble_probabilities(members, case: PatientCase, ecfg: EnsembleConfig | None = None, **kw) -> Volume:
    ecfg = ecfg or EnsembleConfig()
    preds = [predict_case(params, cfg, case, **kw) for params, cfg in members]
    prob = combine_probabilities([p.data for p in preds], ecfg.combine)
    return Volume(prob, preds[0].spacing, preds[0].origin, "PROB")


def ensemble_predict(members, case: PatientCase, ecfg: EnsembleConfig | None = None, **kw) -> Volume:
    """Binary mask from the thresholded mean of ``(params, cfg)`` member predictions."""
    ecfg = ecfg or EnsembleConfig()
    prob = ensemble_probabilities(members, case, ecfg, **kw)
    return Volume(threshold_mask(prob.data, ecfg.threshold), prob.spacing, prob.origin, "MASK")


# -- cross-validation splits ----------------------------------------------


@dataclass
class Fold:
    name: str
    train: list[str]
    validation: list[str]


@dataclass
class SplitPlan:
    kind: str
    folds: list[Fold]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "folds": [asdict(f) for f in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> SplitPlan:
        return cls(d["kind"], [Fold(**f) for f in d["folds"]])


def make_splits(cases, kind: str = "loco", n_random_folds: int = 4, seed: int = 0, val_fraction: float = 0.2) -> SplitPlan:
    """Leave-one-center-out folds, or seeded random train/validation splits.

    ``cases`` is any sequence of objects with ``case_id`` and ``center_id``.
    """
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if kind == "loco":
        centers = sorted({c.center_id for c in cases})
        if len(centers) < 2:
            raise ValueError("leave-one-center-out needs cases from at least two centers")
        folds = [
            Fold(
                center,
                [c.case_id for c in cases if c.center_id != center],
                [c.case_id for c in cases if c.center_id == center],
            )
            for center in centers
        ]
        return SplitPlan("loco", folds)
    if kind == "random":
        if not 0 < val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if len(ids) < 2:
            raise ValueError("random splits need at least two cases")
        n_val = min(len(ids) - 1, max(1, int(round(val_fraction * len(ids)))))
        folds = []
        for k in range(n_random_folds):
            order = np.random.default_rng([seed, k]).permutation(len(ids))
            val = sorted(ids[i] for i in order[:n_val])
            chosen = set(val)
            folds.append(Fold(f"random{k}", [i for i in ids if i not in chosen], val))
        return SplitPlan("random", folds)
    raise ValueError(f"unknown split kind {kind!r}")


# -- evaluation -----------------------------------------------------------


@dataclass
class EvaluationReport:
    per_case: list[MetricsReport]
    per_group: dict[str, AggregateMetrics]
    average: dict[str, float]  # mean over group rows
    pooled: AggregateMetrics  # mean over all cases

    def write(self, fh: TextIO) -> None:
        write_records(self.per_case, fh)
        fh.write("\n# per-center summary\n")
        for group, agg in self.per_group.items():
            fh.write("# " + agg.summary(group) + "\n")
        a = self.average
        fh.write(f"# Average\tDSC {a['dsc']:.3f}\tprecision {a['precision']:.3f}\trecall {a['recall']:.3f}\n")
        fh.write("# " + self.pooled.summary("Pooled") + "\n")


def average_of_groups(groups: Mapping[str, AggregateMetrics]) -> dict[str, float]:
    if not groups:
        raise ValueError("no groups to average")
    rows = list(groups.values())
    return {m: float(np.mean([getattr(r, m) for r in rows])) for m in ("dsc", "precision", "recall")}


def evaluate(masks: Mapping[str, np.ndarray], gts: Mapping[str, np.ndarray], grouping: Mapping[str, str]) -> EvaluationReport:
    """Per-case metrics, per-group mean/std and the mean over group rows."""
    reports = []
    for case_id in masks:
        if case_id not in gts or gts[case_id] is None:
            raise KeyError(f"no ground truth for case {case_id}")
        reports.append(segmentation_metrics(masks[case_id], gts[case_id], case_id))
    groups: dict[str, list[MetricsReport]] = {}
    for r in reports:
        groups.setdefault(grouping[r.case_id], []).append(r)
    per_group = {g: aggregate_metrics(rs) for g, rs in sorted(groups.items())}
    return EvaluationReport(reports, per_group, average_of_groups(per_group), aggregate_metrics(reports))
