"""Layer building blocks on top of :mod:`hyperfusion.tensor`."""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Parameter


def param_rng(seed, name):
    """Independent RNG stream per (seed, parameter name).

    Two models built with the same seed share the values of every
    identically named parameter regardless of construction order.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


class Module:
    """Minimal container: parameters, buffers and child modules are discovered by attribute."""

    name = ""

    def _own(self):
        for value in vars(self).values():
            yield value

    def children(self):
        for value in self._own():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        yield v
            elif isinstance(value, dict):
                for v in value.values():
                    if isinstance(v, Module):
                        yield v

    def modules(self):
        yield self
        for child in self.children():
            yield from child.modules()

    def own_parameters(self):
        return [v for v in self._own() if isinstance(v, Parameter)]

    def parameters(self, include_generated=False):
        seen, out = set(), []
        for m in self.modules():
            for p in m.own_parameters():
                if id(p) in seen or (p.partition == "theta_H" and not include_generated):
                    continue
                seen.add(id(p))
                out.append(p)
        return out

    def buffers(self):
        out = {}
        for m in self.modules():
            out.update(getattr(m, "_buffers", {}))
        return out

    def reset_parameters(self, rng):
        pass


class Linear(Module):
    def __init__(self, name, in_features, out_features, bias=True, seed=0, partition="theta_P"):
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(np.zeros((out_features, in_features)), f"{name}.weight", partition)
        self.bias = Parameter(np.zeros(out_features), f"{name}.bias", partition) if bias else None
        self.reset_parameters(param_rng(seed, name))

    @property
    def fan_in(self):
        return self.in_features

    def reset_parameters(self, rng):
        # He-uniform weights, fan-in uniform biases
        bound = np.sqrt(6.0 / self.fan_in)
        self.weight.data[...] = rng.uniform(-bound, bound, self.weight.shape)
        if self.bias is not None:
            b = 1.0 / np.sqrt(self.fan_in)
            self.bias.data[...] = rng.uniform(-b, b, self.bias.shape)

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, name, cin, cout, k=3, stride=1, padding=None, bias=True, seed=0):
        self.name = name
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(np.zeros((cout, cin, k, k)), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias") if bias else None
        self.reset_parameters(param_rng(seed, name))

    @property
    def fan_in(self):
        return self.cin * self.k * self.k

    reset_parameters = Linear.reset_parameters

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Batch norm for (B, C) or (B, C, H, W) inputs; running stats use momentum 0.1."""

    momentum = 0.1

    def __init__(self, name, channels):
        self.name = name
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self._buffers = {
            f"{name}.running_mean": np.zeros(channels),
            f"{name}.running_var": np.ones(channels),
        }

    def __call__(self, x, training):
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers[f"{self.name}.running_mean"],
            self._buffers[f"{self.name}.running_var"],
            training,
            self.momentum,
        )


class PReLU(Module):
    def __init__(self, name, channels=1, init=0.25, partition="theta_P"):
        self.name = name
        self.slope = Parameter(np.full(channels, init), f"{name}.slope", partition)

    def __call__(self, x):
        return T.prelu(x, self.slope)


class MLP(Module):
    """Linear layers with PReLU between them (none after the last)."""

    def __init__(self, name, widths, seed=0, partition="theta_P", activation="prelu"):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        if activation not in ("prelu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.name = name
        self.widths = list(widths)
        self.layers = [
            Linear(f"{name}.fc{i}", a, b, seed=seed, partition=partition)
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        n_act = len(self.layers) - 1 if activation == "prelu" else 0
        self.acts = [PReLU(f"{name}.act{i}", partition=partition) for i in range(n_act)]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.acts):
                x = self.acts[i](x)
        return x
