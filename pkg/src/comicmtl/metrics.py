"""Segmentation mIoU, depth RMSE and the evaluation report."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import IGNORE, Sample, stack


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. nothing to count)."""


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns prediction."""

    def __init__(self, num_classes: int, ignore: int = IGNORE):
        self.k = num_classes
        self.ignore = ignore
        self.counts = np.zeros((num_classes, num_classes), np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise MetricError(f"prediction {pred.shape} and truth {gt.shape} differ")
        keep = gt != self.ignore
        g, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
        if g.size and (g.max() >= self.k or p.max() >= self.k or min(g.min(), p.min()) < 0):
            raise MetricError(f"labels outside [0, {self.k})")
        self.counts += np.bincount(g * self.k + p, minlength=self.k * self.k).reshape(self.k, self.k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.k, self.ignore)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU in [0, 1]; NaN for classes absent from both maps."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)


def miou(preds, gts, num_classes: int, ignore: int = IGNORE) -> tuple[list[float], float]:
    """(per-class IoU %, mean IoU %) with absent classes left out of the mean."""
    cm = ConfusionMatrix(num_classes, ignore).update(preds, gts)
    if cm.total == 0:
        raise MetricError("no valid pixels to score")
    per = cm.iou() * 100.0
    return per.tolist(), float(np.nanmean(per))


def rmse(pred, gt, mask=None, scale_m: float = 1.0) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"prediction {pred.shape} and truth {gt.shape} differ")
    mask = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise MetricError("empty depth mask")
    d = scale_m * (pred[mask] - gt[mask])
    return float(np.sqrt(np.mean(d * d)))


@dataclass
class MetricsReport:
    method: str
    dta: bool
    miou_percent: float
    rmse: float
    split: str = "val"
    samples: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def score(probs: np.ndarray, depth: np.ndarray, samples: list[Sample], num_classes: int,
          scale_m: float = 1.0) -> tuple[float, float]:
    _, labels, gt_depth, valid = stack(samples)
    _, m = miou(np.argmax(probs, -1), labels, num_classes)
    return m, rmse(depth, gt_depth, valid, scale_m)


def evaluate(model, samples: list[Sample], split: str = "val", method: str = "MTL",
             scale_m: float = 1.0, batch_size: int = 8) -> MetricsReport:
    """Predict every sample and aggregate mIoU and RMSE into one report row."""
    from .decoder import predict

    if not samples:
        raise MetricError(f"split {split!r} has no samples")
    images = np.stack([s.image for s in samples])
    probs, depth = predict(model, images, batch_size)
    m, r = score(probs, depth, samples, model.cfg.num_classes, scale_m)
    label = f"{method}+DTA" if model.cfg.dta_enabled else method
    return MetricsReport(label, model.cfg.dta_enabled, m, r, split, len(samples))
