"""Rank candidate hyperlayer positions by loss entropy under random re-initialization.

For one layer at a time, its parameters are redrawn N times from the usual
fan-in uniform initializer while every other parameter stays fixed. The
spread of the resulting loss values, measured as the Shannon entropy of
their histogram, indicates how much that layer alone can move the output.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .fileio import dumps_json, write_csv
from .nn import Conv2d, Linear


@dataclass
class LayerSelectConfig:
    trials: int = 1000
    bins: int = 50
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.trials < 2:
            raise ValueError("need at least 2 trials")
        if self.bins < 2:
            raise ValueError("need at least 2 bins")

    def to_dict(self):
        return asdict(self)


def histogram_entropy(values, bins):
    """Entropy (nats) of the normalized equal-width histogram over [min, max]."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if not hi > lo:
        return 0.0
    counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def candidate_layers(model):
    """Names of ordinary conv and linear layers, in forward order."""
    return [name for name, layer in model.layers.items() if isinstance(layer, (Linear, Conv2d))]


def _trial_rng(seed, layer_name, trial):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(layer_name.encode()), trial])


def _loss(model, out, y):
    if model.spec.task == "regression":
        mu = float(model._buffers["target_mean"][0])
        sd = float(model._buffers["target_std"][0])
        out = out.reshape(-1)
        return float(np.mean((out - (y - mu) / sd) ** 2))
    logits = out - out.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), np.asarray(y, dtype=int)].mean())


def layer_losses(model, layer_name, batch, config):
    """Loss values over ``config.trials`` re-initializations of one layer; restores the layer after."""
    layer = model.layers.get(layer_name)
    if not isinstance(layer, (Linear, Conv2d)):
        raise ValueError(f"{layer_name!r} is not a re-initializable conv or linear layer")
    images, tab, y = batch
    saved = [p.data.copy() for p in layer.own_parameters()]
    prev_mode = model.mode
    model.eval()
    stage = model.stage_index(layer_name)
    losses = np.empty(config.trials)
    try:
        with T.no_grad():
            x = T.as_tensor(images)
            if x.ndim == 3:
                x = x.reshape(x.shape[0], 1, *x.shape[1:])
            Tb = T.as_tensor(tab)
            h = x
            for _, fn in model.stages[:stage]:
                h = fn(h, Tb, False)
            for t in range(config.trials):
                layer.reset_parameters(_trial_rng(config.seed, layer_name, t))
                out = model.forward_from(stage, h, Tb).data
                losses[t] = _loss(model, out, y)
    finally:
        for p, d in zip(layer.own_parameters(), saved):
            p.data[...] = d
        model.mode = prev_mode
    return losses


def layer_entropy(model, layer_name, batch, config):
    return histogram_entropy(layer_losses(model, layer_name, batch, config), config.bins)


@dataclass
class LayerReport:
    entries: list
    config: dict

    @property
    def ranking(self):
        return [e["layer"] for e in self.entries]

    def to_dict(self):
        return {"config": self.config, "layers": self.entries, "ranking": self.ranking}

    def to_json(self):
        return dumps_json(self.to_dict())

    def write_csv(self, path):
        write_csv(path, ["rank", "layer", "entropy", "loss_mean", "loss_std"],
                  [[i + 1, e["layer"], e["entropy"], e["loss_mean"], e["loss_std"]]
                   for i, e in enumerate(self.entries)])


def rank_layers(model, candidates, batch, config):
    """Entropy per candidate, sorted descending (ties keep candidate order)."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate layers")
    entries = []
    for name in candidates:
        losses = layer_losses(model, name, batch, config)
        entries.append({
            "layer": name,
            "entropy": histogram_entropy(losses, config.bins),
            "loss_mean": float(losses.mean()),
            "loss_std": float(losses.std()),
        })
    order = sorted(range(len(entries)), key=lambda i: (-entries[i]["entropy"], i))
    return LayerReport([entries[i] for i in order], config.to_dict())
