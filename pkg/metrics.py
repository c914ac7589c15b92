"""
Calibration Metrics for Semantic Segmentation
=============================================

Class-balanced calibration metrics computed on sampled pixels:

- Expected Calibration Error (equal-width reliability bins)
- Negative Log-Likelihood
- Brier Score
- mean Intersection over Union
- reliability-diagram export

Probability maps are numpy arrays with the class axis last (H x W x C or
N x H x W x C); label maps use 255 for ignored pixels.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import DomainError, EmptySampleError, ShapeError

IGNORE_INDEX = 255
DEFAULT_NUM_BINS = 15
PROB_FLOOR = 1e-12
METRIC_NAMES = ("ece", "nll", "brier")


@dataclass
class ReliabilityBins:
    """Binned (confidence, correctness) aggregates"""
    edges: np.ndarray
    count: np.ndarray
    conf_sum: np.ndarray
    acc_sum: np.ndarray

    @property
    def num_bins(self) -> int:
        return len(self.count)

    @property
    def total(self) -> int:
        return int(self.count.sum())


@dataclass
class PixelSample:
    """Pixels drawn from one or more probability maps"""
    probs: np.ndarray       # (n, C)
    confidence: np.ndarray  # (n,)
    predicted: np.ndarray   # (n,)
    target: np.ndarray      # (n,)

    def __len__(self) -> int:
        return len(self.target)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.target

    def triples(self) -> List[tuple]:
        """(confidence, predicted_class, true_class) per sampled pixel"""
        return list(zip(self.confidence.tolist(), self.predicted.tolist(), self.target.tolist()))

    @classmethod
    def concatenate(cls, samples: Sequence["PixelSample"]) -> "PixelSample":
        return cls(
            probs=np.concatenate([s.probs for s in samples], axis=0),
            confidence=np.concatenate([s.confidence for s in samples]),
            predicted=np.concatenate([s.predicted for s in samples]),
            target=np.concatenate([s.target for s in samples]),
        )

    def subset(self, mask: np.ndarray) -> "PixelSample":
        return PixelSample(self.probs[mask], self.confidence[mask], self.predicted[mask], self.target[mask])


@dataclass
class ClassMetrics:
    class_id: int
    n_pixels: int
    ece: float
    nll: float
    brier: float


@dataclass
class CalibrationReport:
    per_class: List[ClassMetrics]
    macro: Dict[str, float]
    miou: float
    pooled_bins: Optional[ReliabilityBins] = None
    metadata: Dict[str, str] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        """
        One row per sampled, non-excluded class plus a macro row

        Classes absent from the ground truth sample have no row. mIoU sits
        on the macro row.
        """
        rows = [{"class": str(m.class_id), "n_pixels": m.n_pixels,
                 "ece": m.ece, "nll": m.nll, "brier": m.brier, "miou": np.nan}
                for m in self.per_class]
        rows.append({"class": "macro",
                     "n_pixels": int(sum(m.n_pixels for m in self.per_class)),
                     "ece": self.macro["ece"], "nll": self.macro["nll"],
                     "brier": self.macro["brier"], "miou": self.miou})
        frame = pd.DataFrame(rows, columns=["class", "n_pixels", "ece", "nll", "brier", "miou"])
        for key, value in sorted(self.metadata.items()):
            frame[key] = value
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.10g")


def _check_shapes(probs: np.ndarray, labels: np.ndarray) -> None:
    if probs.ndim < 2 or probs.shape[:-1] != labels.shape:
        raise ShapeError(f"probability map {probs.shape} does not match label map {labels.shape}")


def _flatten(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    _check_shapes(probs, labels)
    flat_probs = probs.reshape(-1, probs.shape[-1])
    flat_labels = labels.reshape(-1).astype(np.int64)
    valid = flat_labels != IGNORE_INDEX
    return flat_probs[valid], flat_labels[valid]


def sample_pixels(probs: np.ndarray, labels: np.ndarray, n: int,
                  rng: np.random.Generator) -> PixelSample:
    """
    Draw up to n non-ignored pixels uniformly without replacement

    Args:
        probs: H x W x C probability map
        labels: H x W label map (255 = ignore)
        n: number of pixels to draw; images with fewer pixels contribute all
        rng: seeded numpy generator

    Returns:
        PixelSample with confidence = max probability and argmax prediction
        (ties go to the lowest class index)
    """
    if n < 1:
        raise ValueError(f"sample size must be at least 1, got {n}")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    _check_shapes(probs, labels)

    flat_probs = probs.reshape(-1, probs.shape[-1])
    flat_labels = labels.reshape(-1).astype(np.int64)
    valid = np.flatnonzero(flat_labels != IGNORE_INDEX)
    if valid.size == 0:
        raise EmptySampleError("every pixel is ignored; nothing to sample")

    k = min(n, valid.size)
    chosen = rng.choice(valid, size=k, replace=False)
    rows = flat_probs[chosen]
    return PixelSample(
        probs=rows,
        confidence=rows.max(axis=1),
        predicted=rows.argmax(axis=1),
        target=flat_labels[chosen],
    )


def bin_samples(confidences, correct, num_bins: int = DEFAULT_NUM_BINS) -> ReliabilityBins:
    """
    Accumulate (confidence, correct) pairs into equal-width bins on [0, 1]

    A confidence c lands in bin floor(c * M), clamped to M - 1.
    """
    if num_bins < 1:
        raise ValueError(f"bin count must be at least 1, got {num_bins}")
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hits = np.asarray(correct, dtype=np.float64).reshape(-1)
    if conf.shape != hits.shape:
        raise ShapeError(f"{conf.size} confidences but {hits.size} correctness flags")
    if conf.size and (np.isnan(conf).any() or conf.min() < 0.0 or conf.max() > 1.0):
        raise DomainError("confidences must lie in [0, 1]")

    index = np.minimum(np.floor(conf * num_bins).astype(np.int64), num_bins - 1)
    return ReliabilityBins(
        edges=np.linspace(0.0, 1.0, num_bins + 1),
        count=np.bincount(index, minlength=num_bins).astype(np.int64),
        conf_sum=np.bincount(index, weights=conf, minlength=num_bins),
        acc_sum=np.bincount(index, weights=hits, minlength=num_bins),
    )


def ece(bins: ReliabilityBins) -> float:
    """Bin-weighted mean absolute gap between accuracy and confidence"""
    total = bins.count.sum()
    if total == 0:
        raise EmptySampleError("cannot compute ECE over zero samples")
    filled = bins.count > 0
    gaps = np.abs(bins.acc_sum[filled] / bins.count[filled] - bins.conf_sum[filled] / bins.count[filled])
    return float(np.sum(bins.count[filled] / total * gaps))


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean -log p(true class) over non-ignored pixels, probabilities floored at 1e-12"""
    rows, targets = _flatten(probs, labels)
    if targets.size == 0:
        raise EmptySampleError("every pixel is ignored")
    picked = rows[np.arange(targets.size), targets]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def brier(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared distance between probability vectors and one-hot labels"""
    rows, targets = _flatten(probs, labels)
    if targets.size == 0:
        raise EmptySampleError("every pixel is ignored")
    onehot = np.zeros_like(rows)
    onehot[np.arange(targets.size), targets] = 1.0
    return float(np.mean(np.sum((rows - onehot) ** 2, axis=1)))


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions).reshape(-1).astype(np.int64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if predictions.shape != labels.shape:
        raise ShapeError("prediction and label maps differ in size")
    valid = labels != IGNORE_INDEX
    codes = labels[valid] * num_classes + predictions[valid]
    return np.bincount(codes, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def mean_iou(predictions: np.ndarray, labels: np.ndarray, num_classes: int,
             exclude_classes: Sequence[int] = ()) -> float:
    """Mean IoU over the classes present in the ground truth, minus any excluded ones"""
    cm = confusion_matrix(predictions, labels, num_classes)
    present = cm.sum(axis=1) > 0
    present[list(exclude_classes)] = False
    if not present.any():
        raise EmptySampleError("no labeled pixels for mIoU")
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    return float(np.mean(inter[present] / union[present]))


def class_balanced_report(probs_batch, labels_batch, num_classes: int,
                          num_bins: int = DEFAULT_NUM_BINS,
                          n_per_image: int = 10000,
                          rng: Optional[np.random.Generator] = None,
                          exclude_classes: Sequence[int] = ()) -> CalibrationReport:
    """
    Class-level ECE / NLL / Brier averaged over classes, plus mIoU

    One pixel sample per image is shared by all three metrics. Per-class
    metrics group sampled pixels by their TRUE label, pooled over the batch;
    the macro value is the unweighted mean over classes with at least one
    sampled pixel. per_class therefore only holds classes that were sampled.

    exclude_classes (e.g. [0] for a background class) drops those classes
    from per_class, the macro mean, the pooled reliability bins and mIoU.
    Their pixels still count as false positives in the IoU of other classes.
    """
    excluded = set(int(c) for c in exclude_classes)
    if rng is None:
        rng = np.random.default_rng(0)
    probs_batch = [np.asarray(p) for p in probs_batch]
    labels_batch = [np.asarray(y) for y in labels_batch]
    if not probs_batch:
        raise EmptySampleError("empty batch")
    if len(probs_batch) != len(labels_batch):
        raise ShapeError(f"{len(probs_batch)} probability maps but {len(labels_batch)} label maps")

    samples = []
    for probs, labels in zip(probs_batch, labels_batch):
        _check_shapes(probs, labels)
        if np.all(labels == IGNORE_INDEX):
            continue
        samples.append(sample_pixels(probs, labels, n_per_image, rng))
    if not samples:
        raise EmptySampleError("no non-ignored pixels anywhere in the batch")
    pooled = PixelSample.concatenate(samples)
    if excluded:
        pooled = pooled.subset(~np.isin(pooled.target, sorted(excluded)))
        if len(pooled) == 0:
            raise EmptySampleError(f"only excluded classes {sorted(excluded)} were sampled")

    per_class = []
    for c in range(num_classes):
        members = pooled.subset(pooled.target == c)
        if len(members) == 0:
            continue
        bins = bin_samples(members.confidence, members.correct, num_bins)
        per_class.append(ClassMetrics(
            class_id=c,
            n_pixels=len(members),
            ece=ece(bins),
            nll=nll(members.probs, members.target),
            brier=brier(members.probs, members.target),
        ))
    macro = {name: float(np.mean([getattr(m, name) for m in per_class])) for name in METRIC_NAMES}

    predictions = np.concatenate([p.argmax(axis=-1).reshape(-1) for p in probs_batch])
    targets = np.concatenate([y.reshape(-1) for y in labels_batch])
    miou = mean_iou(predictions, targets, num_classes, sorted(excluded))

    return CalibrationReport(
        per_class=per_class,
        macro=macro,
        miou=miou,
        pooled_bins=bin_samples(pooled.confidence, pooled.correct, num_bins),
    )


def reliability_diagram_export(bins: ReliabilityBins) -> pd.DataFrame:
    """One row per bin; empty bins carry NaN confidence and accuracy"""
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(bins.count > 0, bins.conf_sum / np.maximum(bins.count, 1), np.nan)
        accuracy = np.where(bins.count > 0, bins.acc_sum / np.maximum(bins.count, 1), np.nan)
    return pd.DataFrame({
        "bin": np.arange(bins.num_bins),
        "lower": bins.edges[:-1],
        "upper": bins.edges[1:],
        "count": bins.count,
        "mean_confidence": mean_conf,
        "accuracy": accuracy,
    })
