"""Soft Dice + focal training loss and overlap metrics (DSC, precision, recall)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, clamp, ln, power


@dataclass
class LossConfig:
    focal_gamma: float = 2.0
    smooth: float = 1.0
    prob_clamp: float = 1e-7
    focal_symmetric: bool = False

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.smooth <= 0:
            raise ValueError("smooth must be > 0")
        if not 0 < self.prob_clamp < 0.5:
            raise ValueError("prob_clamp must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(y, y_hat) -> tuple[Tensor, Tensor]:
    y_hat = as_tensor(y_hat)
    y = as_tensor(y, dtype=y_hat.dtype)
    if y.shape != y_hat.shape:
        raise ShapeError(f"label shape {y.shape} differs from prediction shape {y_hat.shape}")
    return y, y_hat


def soft_dice_loss(y, y_hat, smooth: float = 1.0) -> Tensor:
    """``1 - (2*sum(y*y_hat) + s) / (sum(y) + sum(y_hat) + s)`` over one example."""
    y, y_hat = _pair(y, y_hat)
    numerator = 2.0 * (y * y_hat).sum() + smooth
    denominator = y.sum() + y_hat.sum() + smooth
    return 1.0 - numerator * power(denominator, -1.0)


def focal_loss(y, y_hat, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    y, y_hat = _pair(y, y_hat)
    p = clamp(y_hat, cfg.prob_clamp, 1.0 - cfg.prob_clamp)
    terms = y * power(1.0 - p, cfg.focal_gamma) * ln(p)
    if cfg.focal_symmetric:
        terms = terms + (1.0 - y) * power(p, cfg.focal_gamma) * ln(1.0 - p)
    return -terms.mean()


def loss_terms(y, y_hat, cfg: LossConfig | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(dice, focal, dice + focal) for one example."""
    cfg = cfg or LossConfig()
    dice = soft_dice_loss(y, y_hat, cfg.smooth)
    focal = focal_loss(y, y_hat, cfg)
    return dice, focal, dice + focal


def total_loss(y, y_hat, cfg: LossConfig | None = None) -> Tensor:
    return loss_terms(y, y_hat, cfg)[2]


def batch_loss_terms(y, y_hat, cfg: LossConfig | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Per-example losses over the leading batch axis, averaged."""
    y, y_hat = _pair(y, y_hat)
    n = y_hat.shape[0]
    parts = [loss_terms(y[i], y_hat[i], cfg) for i in range(n)]
    dice = sum((p[0] for p in parts[1:]), parts[0][0]) * (1.0 / n)
    focal = sum((p[1] for p in parts[1:]), parts[0][1]) * (1.0 / n)
    total = sum((p[2] for p in parts[1:]), parts[0][2]) * (1.0 / n)
    return dice, focal, total


# -- evaluation metrics ---------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    case_id: str
    dsc: float
    precision: float
    recall: float
    counts: ConfusionCounts | None = None

    def record(self) -> str:
        return f"{self.case_id}\t{self.dsc:.6f}\t{self.precision:.6f}\t{self.recall:.6f}"


@dataclass
class AggregateMetrics:
    n: int
    dsc: float
    precision: float
    recall: float
    dsc_std: float
    precision_std: float
    recall_std: float

    def summary(self, label: str) -> str:
        return (
            f"{label}\tn={self.n}\tDSC {self.dsc:.3f}±{self.dsc_std:.3f}\t"
            f"precision {self.precision:.3f}±{self.precision_std:.3f}\trecall {self.recall:.3f}±{self.recall_std:.3f}"
        )


def _binary(mask, name: str) -> np.ndarray:
    a = np.asarray(mask)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
        a = a.astype(bool)
    return a


def confusion_counts(pred, gt) -> ConfusionCounts:
    p, g = _binary(pred, "predicted"), _binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} differs from ground truth {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def segmentation_metrics(pred, gt, case_id: str = "") -> MetricsReport:
    """DSC, precision and recall with fixed conventions for empty masks.

    Both empty gives (1, 1, 1); an empty ground truth with a non-empty
    prediction gives (0, 0, 1); an empty prediction with a non-empty ground
    truth gives (0, 1, 0).
    """
    c = confusion_counts(pred, gt)
    pred_any, gt_any = c.tp + c.fp > 0, c.tp + c.fn > 0
    if not pred_any and not gt_any:
        return MetricsReport(case_id, 1.0, 1.0, 1.0, c)
    dsc = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    precision = c.tp / (c.tp + c.fp) if pred_any else 1.0
    recall = c.tp / (c.tp + c.fn) if gt_any else 1.0
    return MetricsReport(case_id, dsc, precision, recall, c)


def aggregate_metrics(reports: Sequence[MetricsReport]) -> AggregateMetrics:
    """Unweighted mean and population standard deviation of each metric."""
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    # sorted columns make the reduction independent of report order
    table = np.sort(np.array([[r.dsc, r.precision, r.recall] for r in reports], dtype=np.float64), axis=0)
    mean = table.mean(axis=0)
    std = table.std(axis=0)
    return AggregateMetrics(len(reports), *mean.tolist(), *std.tolist())


def write_records(reports: Iterable[MetricsReport], fh: TextIO) -> None:
    fh.write("case_id\tdsc\tprecision\trecall\n")
    for r in reports:
        fh.write(r.record() + "\n")


def read_records(fh: TextIO) -> list[MetricsReport]:
    out = []
    for line in fh:
        line = line.strip()
        if not line or line.startswith("case_id") or line.startswith("#"):
            continue
        case_id, dsc, precision, recall = line.split("\t")[:4]
        out.append(MetricsReport(case_id, float(dsc), float(precision), float(recall)))
    return out
