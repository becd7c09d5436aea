"""Losses, class weighting, stratified folds, Adam and the training loop."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .fileio import write_csv
from .metrics import confusion_matrix, mae
from .nn import Linear
from .tensor import NumericalError

SAMPLING_MODES = ("weighted-loss", "oversample", "plain")
LOG_FLOOR = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sampling: str = "weighted-loss"
    pretrain_epochs: int = 0
    seed: int = 0
    task: str = "classification"
    debug: bool = False

    def __post_init__(self):
        # lr == 0 is allowed so a frozen run can be checked
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


# -- losses


def loss_mse(y, y_hat):
    """(1/B) sum (y - y_hat)^2; either argument may be a Tensor."""
    y, y_hat = T.as_tensor(y), T.as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise T.ShapeError("loss_mse", y.shape, y_hat.shape)
    if y.size == 0:
        raise ValueError("empty batch")
    d = y - y_hat
    return T.mean(d * d)


def loss_wce(P, P_hat, w=None):
    """-sum_i sum_c w_c P_ic log(P_hat_ic), log clamped at 1e-12; summed over the batch."""
    P, P_hat = T.as_tensor(P), T.as_tensor(P_hat)
    if P.shape != P_hat.shape or P.ndim != 2:
        raise T.ShapeError("loss_wce", P.shape, P_hat.shape)
    if P.shape[0] == 0:
        raise ValueError("empty batch")
    if (P_hat.data < 0).any():
        raise ValueError("predicted probabilities contain negative entries")
    w = np.ones(P.shape[1]) if w is None else np.asarray(w, dtype=np.float64)
    logp = T.log(T.clamp_min(P_hat, LOG_FLOOR))
    return -T.tsum(logp * (P.data * w))


def regularization(params):
    """Sum of squared entries over regularized parameters (theta_H never counts)."""
    terms = [T.tsum(p * p) for p in params if p.regularized and p.partition != "theta_H"]
    if not terms:
        return T.Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def loss_total(task_loss, params, decay):
    task_loss = T.as_tensor(task_loss)
    if decay == 0:
        return task_loss
    return task_loss + decay * regularization(params)


def class_weights(labels, n_classes):
    """w_c = N / (C N_c), so that sum_c N_c w_c = N (sample-weighted mean of 1)."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).astype(np.float64)
    if (counts == 0).any():
        raise ValueError(f"class {int(np.flatnonzero(counts == 0)[0])} absent from training labels")
    return counts.sum() / (n_classes * counts)


def one_hot(labels, n_classes):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return out


# -- splits


@dataclass
class SplitPlan:
    folds: np.ndarray
    k: int
    seed: int
    strata: np.ndarray

    def indices(self, fold):
        return np.flatnonzero(self.folds == fold)

    def train_val_test(self, test_fold):
        """Test = ``test_fold``, validation = the next fold, training = the rest."""
        val_fold = (test_fold + 1) % self.k
        test = self.indices(test_fold)
        val = self.indices(val_fold)
        train = np.flatnonzero((self.folds != test_fold) & (self.folds != val_fold))
        return train, val, test


def _merge_small_strata(keys, k):
    keys = np.asarray(keys).astype(str).copy()
    while True:
        uniq, counts = np.unique(keys, return_counts=True)
        if len(uniq) <= 1 or counts.min() >= k:
            return keys
        order = np.lexsort((uniq, counts))
        a, b = uniq[order[0]], uniq[order[1]]
        warnings.warn(f"stratum {a!r} has fewer than {k} samples; merged with {b!r}", stacklevel=3)
        keys[keys == a] = b


def stratified_kfold(strata, k, seed):
    """Assign samples to k folds so each fold mirrors the joint strata distribution.

    Within each stratum samples are shuffled and dealt round-robin, continuing
    the deal position across strata so fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    strata = np.asarray(strata)
    if len(strata) < k:
        raise ValueError("fewer samples than folds")
    keys = _merge_small_strata(strata, k)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(keys), dtype=int)
    pos = 0
    for key in np.unique(keys):
        members = np.flatnonzero(keys == key)
        members = members[rng.permutation(len(members))]
        folds[members] = (pos + np.arange(len(members))) % k
        pos += len(members)
    return SplitPlan(folds, k, seed, keys)


# -- optimizer


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, debug=False):
        self.params = list(params)
        if debug:
            for p in self.params:
                assert p.partition != "theta_H", f"{p.name}: generated parameter handed to the optimizer"
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.debug = debug
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.debug:
                assert p.partition != "theta_H", f"{p.name}: optimizer touched a generated parameter"
            if p.grad is None or not p.trainable:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- data and loop


@dataclass
class ArrayData:
    images: np.ndarray
    tab: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if not (len(self.images) == len(self.tab) == len(self.y)):
            raise T.ShapeError("ArrayData", self.images.shape, self.tab.shape, self.y.shape)

    def __len__(self):
        return len(self.y)

    def take(self, idx):
        return ArrayData(self.images[idx], self.tab[idx], self.y[idx])


def epoch_order(labels, mode, rng, n_classes=None):
    """Sample order for one epoch; ``oversample`` tops every class up to the largest count."""
    labels = np.asarray(labels)
    n = len(labels)
    if mode != "oversample":
        return rng.permutation(n)
    classes = np.arange(n_classes) if n_classes else np.unique(labels)
    groups = [np.flatnonzero(labels == c) for c in classes]
    target = max(len(g) for g in groups)
    parts = []
    for g in groups:
        if len(g) == 0:
            continue
        reps, rem = divmod(target, len(g))
        parts.append(np.concatenate([np.tile(g, reps), rng.choice(g, rem, replace=False)]))
    idx = np.concatenate(parts)
    return idx[rng.permutation(len(idx))]


class History:
    def __init__(self):
        self.rows = []

    def add(self, epoch, split, loss, metric):
        self.rows.append({"epoch": epoch, "split": split, "loss": float(loss), "metric": float(metric)})

    def series(self, split, key="loss"):
        return np.array([r[key] for r in self.rows if r["split"] == split])

    def to_csv(self, path):
        write_csv(path, ["epoch", "split", "loss", "metric"],
                  [[r["epoch"], r["split"], r["loss"], r["metric"]] for r in self.rows])


def _batch_loss(model, batch, task, weights):
    if task == "regression":
        out = model(batch.images, batch.tab, raw=True)
        mu = float(model._buffers["target_mean"][0])
        sd = float(model._buffers["target_std"][0])
        return loss_mse((batch.y - mu) / sd, out)
    probs = model(batch.images, batch.tab)
    return loss_wce(one_hot(batch.y, probs.shape[1]), probs, weights)


def evaluate_split(model, data, task, weights=None, batch_size=256):
    """(loss, metric) on a split in eval mode: metric is BA or MAE."""
    pred = model.predict(data.images, data.tab, batch_size)
    if task == "regression":
        sd = float(model._buffers["target_std"][0])
        loss = float(np.mean(((data.y - pred) / sd) ** 2))
        return loss, mae(data.y, pred)
    C = pred.shape[1]
    loss = float(loss_wce(one_hot(data.y, C), pred, weights).data)
    cm = confusion_matrix(data.y, pred.argmax(axis=1), C)
    present = cm.sum(axis=1) > 0
    ba = float((np.diag(cm)[present] / cm.sum(axis=1)[present]).mean())
    return loss, ba


def pretrain_embeddings(model, tab, y, config, n_classes=None):
    """Fit each hypernetwork embedding to the label through a temporary linear head."""
    rng = np.random.default_rng([config.seed, 7])
    task = config.task
    for layer in model.hyperlayers():
        net = layer.embedding
        width = 1 if task == "regression" else n_classes
        head = Linear(f"{layer.name}.pretrain_head", net.out_dim, width, seed=config.seed)
        params = net.parameters() + head.parameters()
        opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
        target = (y - y.mean()) / (y.std() + 1e-12) if task == "regression" else y
        for _ in range(config.pretrain_epochs):
            order = rng.permutation(len(y))
            for i in range(0, len(order), config.batch_size):
                idx = order[i : i + config.batch_size]
                out = head(net(T.Tensor(tab[idx])))
                if task == "regression":
                    loss = loss_mse(target[idx], out.reshape(-1))
                else:
                    loss = loss_wce(one_hot(target[idx], width), T.softmax(out, axis=1))
                T.backward(loss)
                opt.step()
    model.init_from_data(tab)


def train(model, train_data, val_data, config):
    """Fit ``model``; returns (model restored to its best validation state, History)."""
    task = config.task
    if task != model.spec.task:
        raise ValueError(f"config task {task!r} does not match model task {model.spec.task!r}")
    if len(train_data) == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng([config.seed, 3])
    C = model.spec.output_width
    if task == "regression":
        model._buffers["target_mean"][0] = train_data.y.mean()
        model._buffers["target_std"][0] = max(train_data.y.std(), 1e-12)
        weights = None
    else:
        weights = class_weights(train_data.y, C) if config.sampling == "weighted-loss" else np.ones(C)
    if model.hyperlayers():
        model.init_from_data(train_data.tab)
        if config.pretrain_epochs:
            pretrain_embeddings(model, train_data.tab, train_data.y, config, C)
    params = model.parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps, config.debug)
    history = History()
    better = (lambda a, b: a > b) if task == "classification" else (lambda a, b: a < b)
    best_metric, best_state = None, model.state_dict()
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = epoch_order(train_data.y, config.sampling, rng, C if task == "classification" else None)
        losses = []
        for step, i in enumerate(range(0, len(order), config.batch_size)):
            batch = train_data.take(order[i : i + config.batch_size])
            task_loss = _batch_loss(model, batch, task, weights)
            loss = loss_total(task_loss, params, config.weight_decay)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
            T.backward(loss)
            opt.step()
            losses.append(float(task_loss.data) / (len(batch) if task == "classification" else 1))
        history.add(epoch, "train", np.mean(losses), np.nan)
        if val_data is not None and len(val_data):
            vloss, vmetric = evaluate_split(model, val_data, task, weights)
            history.add(epoch, "val", vloss / (len(val_data) if task == "classification" else 1), vmetric)
            if best_metric is None or better(vmetric, best_metric):
                best_metric, best_state = vmetric, model.state_dict()
        else:
            best_state = model.state_dict()
    if config.epochs:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


__all__ = [
    "TrainConfig", "loss_mse", "loss_wce", "loss_total", "regularization", "class_weights",
    "stratified_kfold", "SplitPlan", "Adam", "ArrayData", "History", "train", "epoch_order",
    "evaluate_split", "pretrain_embeddings"
]
