"""Accuracy, calibration and OOD-uncertainty metrics on predictive distributions."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class PredictionSet:
    probs: np.ndarray  # (N, C)
    labels: np.ndarray | None = None
    source: str = "ID"

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        if np.any(self.probs < 0) or not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ContractError("probability vectors must be nonnegative and sum to 1")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.intp)
            if self.labels.shape != (len(self.probs),):
                raise ContractError("labels must have one entry per prediction")
        if self.source not in ("ID", "OOD"):
            raise ContractError("source must be 'ID' or 'OOD'")

    def __len__(self):
        return len(self.probs)


def _labelled(preds: PredictionSet):
    if preds.labels is None:
        raise ContractError("this metric needs labels")
    if len(preds) == 0:
        raise ContractError("empty prediction set")
    return preds.probs, preds.labels


def accuracy(preds: PredictionSet) -> float:
    """Fraction of argmax hits; ``np.argmax`` breaks ties toward the lowest index."""
    probs, labels = _labelled(preds)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def reliability_bins(preds: PredictionSet, num_bins=15):
    """Per-bin (count, accuracy, mean confidence) over equal-width bins on [0, 1].

    Bins are right-closed, ``(k/B, (k+1)/B]``, with confidence 0 falling into the first.
    """
    if num_bins < 1:
        raise ContractError("num_bins must be >= 1")
    probs, labels = _labelled(preds)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * num_bins).astype(int) - 1, 0, num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins).astype(np.float64)
    acc_sum = np.bincount(idx, weights=correct, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, acc_sum / counts, 0.0)
        mean_conf = np.where(counts > 0, conf_sum / counts, 0.0)
    return counts, acc, mean_conf


def ece(preds: PredictionSet, num_bins=15) -> float:
    counts, acc, conf = reliability_bins(preds, num_bins)
    return float(np.sum(counts / counts.sum() * np.abs(acc - conf)))


def predictive_entropy(p) -> np.ndarray | float:
    """Shannon entropy in nats along the last axis, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


@dataclass
class RocResult:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def roc_auc(id_scores, ood_scores) -> RocResult:
    """AUC = P(OOD score > ID score) + 0.5 P(tie), plus the ROC curve (OOD = positive)."""
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ContractError("both score sets must be nonempty")
    # Mann-Whitney via sorted ranks with midranks for ties
    sorted_id = np.sort(id_scores)
    below = np.searchsorted(sorted_id, ood_scores, side="left")
    at_or_below = np.searchsorted(sorted_id, ood_scores, side="right")
    ties = at_or_below - below
    auc = float((below.sum() + 0.5 * ties.sum()) / (id_scores.size * ood_scores.size))

    thresholds = np.unique(np.concatenate([id_scores, ood_scores]))[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for thr in thresholds:
        tpr.append(float(np.mean(ood_scores >= thr)))
        fpr.append(float(np.mean(id_scores >= thr)))
    thresholds = np.concatenate([[np.inf], thresholds])
    return RocResult(auc, np.array(fpr), np.array(tpr), thresholds)


def entropy_histogram(entropies, bins, source):
    counts, edges = np.histogram(np.asarray(entropies), bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i]), source) for i in range(len(counts))]


def write_metrics_csv(path, rows):
    """Rows of ``(metric, value, split)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "split"])
        for metric, value, split in rows:
            writer.writerow([metric, repr(float(value)), split])


def write_histogram_csv(path, rows):
    """Rows of ``(bin_left, bin_right, count, source)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count", "source"])
        for left, right, count, source in rows:
            writer.writerow([repr(left), repr(right), count, source])
