"""Combining several trained models.

Regression members are averaged. Classification members are averaged with
per-sample weights proportional to the reciprocal of each member's
prediction entropy, so confident members count more.
"""

from __future__ import annotations

import numpy as np

ENTROPY_FLOOR = 1e-8


class EnsembleError(ValueError):
    pass


def _check_distribution(p, who="distribution"):
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any() or not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise EnsembleError(f"{who} is not a probability distribution")
    return p


def entropy(p):
    """Natural-log Shannon entropy over the last axis, with 0 ln 0 = 0."""
    p = _check_distribution(p)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=-1)


def entropy_weights(member_probs, eps=ENTROPY_FLOOR):
    """Weights w_m = J_m / sum_i J_i with J = 1 / max(H, eps); shape (M, ...)."""
    H = np.stack([entropy(p) for p in member_probs])
    J = 1.0 / np.maximum(H, eps)
    return J / J.sum(axis=0, keepdims=True)


def combine_classification(member_probs, eps=ENTROPY_FLOOR):
    """Entropy-weighted average of member distributions.

    ``member_probs`` is a sequence of M arrays of shape (C,) or (n, C).
    Returns (probabilities, weights) with weights of shape (M,) or (M, n).
    """
    if len(member_probs) == 0:
        raise EnsembleError("empty ensemble")
    probs = []
    for m, p in enumerate(member_probs):
        try:
            probs.append(_check_distribution(p, f"member {m}"))
        except EnsembleError as exc:
            raise EnsembleError(str(exc)) from None
    shapes = {p.shape for p in probs}
    if len(shapes) != 1:
        raise EnsembleError(f"members disagree on output shape: {sorted(shapes)}")
    w = entropy_weights(probs, eps)
    P = np.stack(probs)
    out = (w[..., None] * P).sum(axis=0)
    return out, w


def combine_regression(member_preds):
    if len(member_preds) == 0:
        raise EnsembleError("empty ensemble")
    P = np.stack([np.asarray(p, dtype=np.float64) for p in member_preds])
    return P.mean(axis=0)


class Ensemble:
    """Members share a task; ``predict`` returns the combined output."""

    def __init__(self, members, task=None, eps=ENTROPY_FLOOR):
        if not members:
            raise EnsembleError("empty ensemble")
        tasks = {m.spec.task for m in members}
        widths = {m.spec.output_width for m in members}
        if len(tasks) != 1 or len(widths) != 1:
            raise EnsembleError("ensemble members must share task and output shape")
        self.members = list(members)
        self.task = task or tasks.pop()
        self.eps = eps

    def member_predictions(self, images, Tb):
        return [m.predict(images, Tb) for m in self.members]

    def predict(self, images, Tb):
        preds = self.member_predictions(images, Tb)
        if self.task == "regression":
            return combine_regression(preds)
        return combine_classification(preds, self.eps)[0]


def ensemble_regress(ensemble, Tb, images):
    if ensemble.task != "regression":
        raise EnsembleError("ensemble_regress needs a regression ensemble")
    return ensemble.predict(images, Tb)


def ensemble_classify(ensemble, Tb, images):
    if ensemble.task != "classification":
        raise EnsembleError("ensemble_classify needs a classification ensemble")
    return combine_classification(ensemble.member_predictions(images, Tb), ensemble.eps)
