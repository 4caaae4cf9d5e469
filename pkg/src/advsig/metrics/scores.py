"""Detection and classification metrics."""

import csv
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from ..errors import DataError, UndefinedMetricError


def _trials(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 (negative) or 1 (positive)")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("both positive and negative trials are required")
    return s, y


def roc_auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counted as 1/2."""
    s, y = _trials(scores, labels)
    ranks = rankdata(s)  # average ranks give ties half credit
    n_pos = y.sum()
    n_neg = y.size - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _det_curve(s, y):
    # threshold t accepts score >= t; sweep every distinct score plus +inf
    thr = np.append(np.unique(s), np.inf)
    pos, neg = s[y == 1], s[y == 0]
    fpr = np.array([(neg >= t).mean() for t in thr])
    fnr = np.array([(pos < t).mean() for t in thr])
    return thr, fpr, fnr


def eer(scores, labels):
    """Equal error rate, linearly interpolated where FPR and FNR cross."""
    s, y = _trials(scores, labels)
    _, fpr, fnr = _det_curve(s, y)
    d = fpr - fnr
    # d starts at 1 (accept all) and falls to -1 (reject all)
    i = int(np.argmax(d <= 0))
    if d[i] == 0 or i == 0:
        return float(fpr[i])
    lam = d[i - 1] / (d[i - 1] - d[i])
    return float(fpr[i - 1] + lam * (fpr[i] - fpr[i - 1]))


def detection_accuracy(scores, labels, threshold=0.5):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.size == 0:
        raise DataError("no trials")
    return float(((s >= threshold).astype(int) == y).mean())


def detection_report(scores, labels, threshold=0.5):
    return {
        "auc": roc_auc(scores, labels),
        "accuracy": detection_accuracy(scores, labels, threshold),
        "eer": eer(scores, labels),
        "n": int(np.size(scores)),
    }


def confusion_and_accuracy(true_labels, predicted_labels, label_space):
    """Row-normalised confusion matrix in percent (rows = true class) and overall accuracy.

    Rows of classes that never occur are left at zero.
    """
    true_labels, predicted_labels = list(true_labels), list(predicted_labels)
    if not true_labels:
        raise DataError("empty label lists")
    if len(true_labels) != len(predicted_labels):
        raise DataError("true and predicted label lists differ in length")
    index = {lab: i for i, lab in enumerate(label_space)}
    k = len(label_space)
    counts = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        if t not in index or p not in index:
            raise DataError(f"label outside label space: {t!r} / {p!r}")
        counts[index[t], index[p]] += 1
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(100.0 * counts, rows, out=np.zeros((k, k)), where=rows > 0)
    return norm, float(np.trace(counts) / counts.sum())


def most_confused_pair(matrix, label_space):
    """Off-diagonal cell with the largest percentage, as ``(true, predicted, percent)``."""
    m = np.array(matrix, dtype=np.float64)
    np.fill_diagonal(m, -1.0)
    i, j = np.unravel_index(int(np.argmax(m)), m.shape)
    return label_space[i], label_space[j], float(m[i, j])


def write_confusion_csv(path, matrix, label_space):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *label_space])
        for lab, row in zip(label_space, np.asarray(matrix)):
            w.writerow([lab, *[f"{v:.4f}" for v in row]])
