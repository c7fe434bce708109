"""Confusion counts, classification metrics, ROC/AUC and k-fold partitions."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import HEALTHY, LABEL_NAMES, PD

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    TN: int
    FP: int
    FN: int
    positive_class: int = HEALTHY

    def __post_init__(self):
        if min(self.TP, self.TN, self.FP, self.FN) < 0:
            raise ValueError("confusion counts must be non-negative")
        if self.positive_class not in LABEL_NAMES:
            raise ValueError(f"unknown positive class {self.positive_class!r}")

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN

    def swapped(self) -> "ConfusionCounts":
        other = PD if self.positive_class == HEALTHY else HEALTHY
        return ConfusionCounts(self.TN, self.TP, self.FN, self.FP, other)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: bool = False   # a zero denominator was replaced by 0


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float                 # nan when the evaluated set holds one class only
    roc: tuple                 # ((fpr, tpr), ...)
    confusion: ConfusionCounts
    degenerate: bool = False


def _check_labels(values, what):
    arr = np.asarray(values)
    bad = ~np.isin(arr, (HEALTHY, PD))
    if bad.any():
        raise ValueError(f"unknown {what} value {arr[bad][0]!r}; expected 0 (Healthy) or 1 (PD)")
    return arr.astype(np.int64)


def confusion(labels, predictions, positive_class: int = HEALTHY) -> ConfusionCounts:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ValueError(f"length mismatch: {labels.size} labels vs {predictions.size} predictions")
    t = _check_labels(labels, "label") == positive_class
    p = _check_labels(predictions, "prediction") == positive_class
    return ConfusionCounts(
        TP=int(np.sum(t & p)), TN=int(np.sum(~t & ~p)),
        FP=int(np.sum(~t & p)), FN=int(np.sum(t & ~p)),
        positive_class=positive_class,
    )


def compute_metrics(cm: ConfusionCounts) -> Metrics:
    if cm.total == 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    degenerate = False
    accuracy = (cm.TP + cm.TN) / cm.total
    if cm.TP + cm.FP:
        precision = cm.TP / (cm.TP + cm.FP)
    else:
        precision, degenerate = 0.0, True
    if cm.TP + cm.FN:
        recall = cm.TP / (cm.TP + cm.FN)
    else:
        recall, degenerate = 0.0, True
    if cm.TP:
        # same value as the harmonic mean of precision and recall, one rounding
        f1 = 2 * cm.TP / (2 * cm.TP + cm.FP + cm.FN)
    else:
        f1, degenerate = 0.0, True
    return Metrics(accuracy, precision, recall, f1, degenerate)


def roc_and_auc(scores, labels, positive_class: int = HEALTHY) -> tuple[tuple, float]:
    """ROC points and trapezoidal AUC; higher scores mean "more positive".

    Equal scores form one threshold step, so the AUC equals the probability
    that a random positive outscores a random negative with ties worth 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels, "label")
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    pos = labels == positive_class
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes in labels")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], pos[order]
    # last index of each block of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(p)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / n_neg
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)
    return tuple(zip(fpr.tolist(), tpr.tolist())), auc


def pairwise_auc(scores, labels, positive_class: int = HEALTHY) -> float:
    """Brute-force P(score_pos > score_neg) + P(tie) / 2."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) == positive_class
    a, b = scores[pos][:, None], scores[~pos][None, :]
    if a.size == 0 or b.size == 0:
        raise ValueError("need both classes")
    return float(((a > b).sum() + 0.5 * (a == b).sum()) / (a.size * b.size))


def evaluate(labels, predictions, scores, positive_class: int = HEALTHY) -> MetricsReport:
    cm = confusion(labels, predictions, positive_class)
    m = compute_metrics(cm)
    labels = np.asarray(labels)
    if np.unique(labels).size == 2:
        roc, auc = roc_and_auc(scores, labels, positive_class)
    else:
        roc, auc = (), float("nan")
    return MetricsReport(m.accuracy, m.precision, m.recall, m.f1, auc, roc, cm, m.degenerate)


def kfold_split(n: int, k: int, labels=None, seed: int = 0, stratified: bool = True) -> list[np.ndarray]:
    """``k`` disjoint sorted index arrays covering ``range(n)``, sizes within 1.

    Stratified mode shuffles each class separately, lays the classes end to
    end and deals positions round-robin, which balances class counts per fold
    while keeping the overall size rule.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples n={n}")
    rng = np.random.default_rng(seed)
    if stratified:
        if labels is None:
            raise ValueError("stratified folds need labels")
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError("labels must have length n")
        classes, counts = np.unique(labels, return_counts=True)
        if counts.min() < k:
            warnings.warn(
                f"smallest class has {counts.min()} samples < k={k}; using plain shuffled folds",
                RuntimeWarning, stacklevel=2,
            )
            stratified = False
    if stratified:
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in classes])
    else:
        order = rng.permutation(n)
    assignment = np.arange(n) % k
    return [np.sort(order[assignment == f]) for f in range(k)]


def mean_and_std(values) -> tuple[float, float]:
    """NaN-skipping mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std
