"""Classification metrics, ROC/AUC and the Kruskal-Wallis H test.

Decline is the positive class (label 1).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class MetricsError(ValueError):
    pass


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: list[str] = field(default_factory=list)


@dataclass
class EvalReport:
    model_name: str
    na_fraction: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    roc_points: list[tuple[float, float]]
    n: int = 0

    CSV_FIELDS = ("model", "na_fraction", "n", "accuracy", "precision", "recall", "f1", "auc")

    def csv_row(self) -> list[str]:
        vals = [self.accuracy, self.precision, self.recall, self.f1, self.auc]
        return [self.model_name, f"{self.na_fraction:.4f}", str(self.n),
                *(f"{v:.6f}" for v in vals)]


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.ndim != 1 or s.size == 0:
        raise MetricsError("scores and labels must be equal-length non-empty vectors")
    if not np.all(np.isin(y, (0, 1))):
        raise MetricsError("labels must be 0/1")
    return s, y


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with ``score >= threshold`` predicted positive."""
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return tp, fp, tn, fn


def classification_metrics(scores, labels, threshold: float = 0.5) -> ClassificationMetrics:
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    undefined = []
    if tp + fp == 0:
        undefined.append("precision")
    if tp + fn == 0:
        undefined.append("recall")
    if undefined:
        logger.warning("zero denominator for %s; reported as 0", ", ".join(undefined))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = (tp + tn) / (tp + fp + tn + fn)
    return ClassificationMetrics(accuracy, precision, recall, f1, undefined)


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """ROC points from (0, 0) to (1, 1), one step per distinct score."""
    s, y = _check(scores, labels)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    distinct = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    pts = [(0.0, 0.0)]
    pts += [(float(f) / n_neg, float(t) / n_pos) for f, t in zip(fps, tps)]
    return pts


def trapezoid_auc(points: Sequence[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def roc_auc(scores, labels) -> tuple[list[tuple[float, float]], float]:
    pts = roc_curve(scores, labels)
    return pts, trapezoid_auc(pts)


def evaluate(model_name: str, na_fraction: float, scores, labels,
             threshold: float = 0.5) -> EvalReport:
    m = classification_metrics(scores, labels, threshold)
    pts, auc = roc_auc(scores, labels)
    return EvalReport(model_name, na_fraction, m.accuracy, m.precision, m.recall, m.f1, auc,
                      pts, n=len(scores))


# ---------------------------------------------------------------------------
# Kruskal-Wallis


def rankdata(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given their mean rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _gammainc_series(a: float, x: float) -> float:
    # lower regularized P(a, x), converges fast for x < a + 1
    term = 1.0 / a
    total = term
    n = 0
    while abs(term) > abs(total) * 1e-17:
        n += 1
        term *= x / (a + n)
        total += term
        if n > 10000:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammaincc_cf(a: float, x: float) -> float:
    # upper regularized Q(a, x) via the Lentz continued fraction, for x >= a + 1
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammaincc(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gammainc_series(a, x)
    return _gammaincc_cf(a, x)


def chi2_sf(x: float, df: int) -> float:
    """Survival function of the chi-square distribution."""
    return gammaincc(df / 2.0, x / 2.0)


@dataclass
class KruskalResult:
    H: float
    p: float
    df: int


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> KruskalResult:
    """Kruskal-Wallis H with tie correction; p from chi-square with k-1 df."""
    if len(groups) < 2:
        raise MetricsError("Kruskal-Wallis needs at least 2 groups")
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if any(a.size == 0 for a in arrays):
        raise MetricsError("every group must be non-empty")
    pooled = np.concatenate(arrays)
    n = pooled.size
    ranks = rankdata(pooled)
    h, start = 0.0, 0
    for a in arrays:
        r = ranks[start : start + a.size]
        h += r.sum() ** 2 / a.size
        start += a.size
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    _, counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(np.sum(counts**3 - counts)) / (n**3 - n)
    if correction == 0:
        raise MetricsError("all values identical; H is undefined")
    h /= correction
    df = len(arrays) - 1
    return KruskalResult(float(h), chi2_sf(float(h), df), df)
