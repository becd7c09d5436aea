"""Classification and regression metrics and the Mann-Whitney U test."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import norm, rankdata


class MetricError(ValueError):
    pass


def confusion_matrix(y_true, y_pred, n_classes=None):
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise MetricError("label arrays differ in length")
    if n_classes is None:
        n_classes = int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check_cm(cm):
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise MetricError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise MetricError("confusion matrix has negative counts")
    return cm.astype(np.float64)


def per_class_recall(cm):
    cm = _check_cm(cm)
    support = cm.sum(axis=1)
    empty = np.flatnonzero(support == 0)
    if empty.size:
        raise MetricError(f"true class {int(empty[0])} has no samples")
    return np.diag(cm) / support


def balanced_accuracy(cm):
    return float(per_class_recall(cm).mean())


def per_class_precision(cm):
    cm = _check_cm(cm)
    predicted = cm.sum(axis=0)
    out = np.zeros(len(cm))
    for c in range(len(cm)):
        if predicted[c] == 0:
            warnings.warn(f"class {c} was never predicted; its precision counts as 0", stacklevel=3)
        else:
            out[c] = cm[c, c] / predicted[c]
    return out


def precision_macro(cm):
    return float(per_class_precision(cm).mean())


def f1_macro(cm):
    cm = _check_cm(cm)
    tp = np.diag(cm)
    denom = 2 * tp + (cm.sum(axis=0) - tp) + (cm.sum(axis=1) - tp)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def auc_binary(scores, positive):
    """Area under the ROC curve as the normalized Mann-Whitney statistic (midranks for ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n1 = positive.sum()
    n0 = len(positive) - n1
    if n1 == 0 or n0 == 0:
        raise MetricError("AUC undefined with a single class present")
    r = rankdata(scores)
    return float((r[positive].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def auc_macro(scores, labels):
    """One-vs-rest AUC averaged over classes; ``scores`` is (n, C) probabilities."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.ndim == 1:
        scores = np.stack([1 - scores, scores], axis=1)
    if len(np.unique(labels)) < 2:
        raise MetricError("AUC undefined with a single class present")
    C = scores.shape[1]
    present = [c for c in range(C) if (labels == c).any()]
    return float(np.mean([auc_binary(scores[:, c], labels == c) for c in present]))


def mae(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise MetricError("y and y_hat differ in shape")
    if y.size == 0:
        raise MetricError("MAE of an empty sample")
    return float(np.abs(y - y_hat).mean())


def mann_whitney_u(a, b):
    """Two-sided p-value, normal approximation with tie and continuity corrections."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise MetricError("Mann-Whitney U needs two non-empty samples")
    pooled = np.concatenate([a, b])
    n = n1 + n2
    r = rankdata(pooled)
    u1 = r[:n1].sum() - n1 * (n1 + 1) / 2
    mu = n1 * n2 / 2
    _, counts = np.unique(pooled, return_counts=True)
    tie = (counts**3 - counts).sum()
    var = n1 * n2 / 12 * ((n + 1) - tie / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return 1.0
    z = (abs(u1 - mu) - 0.5) / np.sqrt(var)
    if z <= 0:
        return 1.0
    return float(min(1.0, 2 * norm.sf(z)))


def classification_report(y_true, probs, n_classes=None):
    """Metrics dict for predicted class probabilities (n, C)."""
    probs = np.asarray(probs, dtype=np.float64)
    n_classes = n_classes or probs.shape[1]
    y_true = np.asarray(y_true, dtype=int)
    cm = confusion_matrix(y_true, probs.argmax(axis=1), n_classes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prc = precision_macro(cm)
    support = cm.sum(axis=1, keepdims=True)
    present = support[:, 0] > 0
    # a subgroup may lack a class entirely: average recall over the classes it has
    tp = np.diag(cm) / np.maximum(support[:, 0], 1)
    rep = {
        "n": int(len(y_true)),
        "ba": float(tp[present].mean()),
        "prc": prc,
        "f1_macro": f1_macro(cm),
        "auc_macro": auc_macro(probs, y_true) if len(np.unique(y_true)) > 1 else None,
        "absent_classes": np.flatnonzero(~present).tolist(),
        "tp_rates": [float(t) if ok else None for t, ok in zip(tp, present)],
        "confusion": cm.tolist(),
        "confusion_normalized": (cm / np.maximum(support, 1)).tolist(),
    }
    return rep


def regression_report(y, y_hat):
    return {"n": int(len(y)), "mae": mae(y, y_hat)}
