"""Tabular embedding, weight-generating heads and hyper-conditioned layers.

A hyperlayer owns a small embedding network that maps the encoded tabular
vector to a latent ``e``, plus two linear heads that turn ``e`` into the
layer's weight tensor and bias vector. The generated tensors are recorded
under partition ``theta_H``; only the embedding and heads (``phi``) are
trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Module, param_rng
from .tensor import Parameter, ShapeError

MIN_EMBED_VARIANCE = 1e-12


class EmbeddingNet(MLP):
    """Maps T in R^d to e in R^l (l <= d when d > 1)."""

    def __init__(self, name, d, out_dim, hidden=(), activation="prelu", seed=0):
        if d > 1 and out_dim > d:
            raise ValueError(f"embedding width {out_dim} exceeds tabular width {d}")
        if not hidden:
            activation = "identity"
        super().__init__(name, [d, *hidden, out_dim], seed=seed, partition="phi", activation=activation)
        self.d, self.out_dim = d, out_dim


def embed(T_vec, net):
    """Embed a batch (B, d) or a single vector (d,)."""
    x = T.as_tensor(T_vec)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.shape[-1] != net.d:
        raise ShapeError("embed", x.shape, (net.d,))
    e = net(x)
    return e.reshape(-1) if single else e


class HyperHead(Module):
    """Linear maps R^l -> flat weight block and R^l -> bias of one target layer."""

    def __init__(self, name, weight_shape, bias_len, d_k, fan_in, seed=0):
        if d_k < 1 or fan_in < 1:
            raise ValueError("d_k and d_j must be >= 1")
        self.name = name
        self.weight_shape = tuple(weight_shape)
        self.bias_len = bias_len
        self.d_k, self.d_j = d_k, fan_in
        n_w = int(np.prod(self.weight_shape))
        self.weight_head = Parameter(np.zeros((n_w, d_k)), f"{name}.weight_head", "phi")
        self.weight_head_bias = Parameter(np.zeros(n_w), f"{name}.weight_head_bias", "phi")
        self.bias_head = Parameter(np.zeros((bias_len, d_k)), f"{name}.bias_head", "phi")
        self.bias_head_bias = Parameter(np.zeros(bias_len), f"{name}.bias_head_bias", "phi")
        init_heads(HyperInitSpec(fan_in, d_k, 1.0), self, seed)

    @property
    def n_weights(self):
        return self.weight_head.shape[0]


@dataclass(frozen=True)
class HyperInitSpec:
    d_j: int
    d_k: int
    var_e: float

    def __post_init__(self):
        if self.d_j < 1 or self.d_k < 1:
            raise ValueError("d_j and d_k must be >= 1")
        if not self.var_e > MIN_EMBED_VARIANCE:
            raise ValueError(f"degenerate embedding variance ({self.var_e:g})")

    @property
    def weight_variance(self):
        return 1.0 / (self.d_j * self.d_k * self.var_e)

    @property
    def bias_variance(self):
        return 1.0 / (self.d_k * self.var_e)


def init_heads(spec, head, seed):
    """Uniform(+-sqrt(3 V)) head weights with V from fan-ins and embedding variance; zero head biases."""
    if spec.d_k != head.d_k:
        raise ShapeError("init_heads", (spec.d_k,), (head.d_k,))
    rng = np.random.default_rng(seed)
    bw = np.sqrt(3.0 * spec.weight_variance)
    bb = np.sqrt(3.0 * spec.bias_variance)
    head.weight_head.data[...] = rng.uniform(-bw, bw, head.weight_head.shape)
    head.bias_head.data[...] = rng.uniform(-bb, bb, head.bias_head.shape)
    head.weight_head_bias.data[...] = 0.0
    head.bias_head_bias.data[...] = 0.0
    return head


def embedding_variance(net, T_train):
    """Variance of e(T) pooled over all embedding components and training rows."""
    T_train = np.asarray(T_train, dtype=np.float64)
    if T_train.ndim != 2 or T_train.shape[0] < 32:
        raise ValueError("need at least 32 training rows to estimate the embedding variance")
    with T.no_grad():
        e = net(T.Tensor(T_train)).data
    return float(e.var())


def standardize_embedding(net, T_train):
    """Shift and rescale the last embedding layer so each component of e(T_train) has mean 0, variance 1.

    The head scale 1/(d_j d_k Var(e)) preserves variance only for zero-mean e;
    a random embedding init can sit far from zero (E[e^2] >> Var(e)), which
    inflates every generated layer. Constant components are only centered.
    """
    T_train = np.asarray(T_train, dtype=np.float64)
    with T.no_grad():
        e = net(T.Tensor(T_train)).data
    mu, sd = e.mean(axis=0), e.std(axis=0)
    scale = np.where(sd > np.sqrt(MIN_EMBED_VARIANCE), sd, 1.0)
    if np.abs(mu).max() < 1e-9 and np.abs(scale - 1.0).max() < 1e-9:
        # already standardized on these rows; keep re-initialization bit-stable
        return mu, scale
    last = net.layers[-1]
    last.weight.data[...] = last.weight.data / scale[:, None]
    last.bias.data[...] = (last.bias.data - mu) / scale
    return mu, scale


def generate_params(e, head):
    """Generated (W, B) for a batch of embeddings e (B, l); shapes (B, *weight_shape), (B, bias_len)."""
    e = T.as_tensor(e)
    if e.ndim != 2 or e.shape[1] != head.d_k:
        raise ShapeError("generate_params", e.shape, (head.d_k,))
    w = T.linear(e, head.weight_head, head.weight_head_bias)
    w = w.reshape((e.shape[0],) + head.weight_shape)
    b = T.linear(e, head.bias_head, head.bias_head_bias)
    w.partition = b.partition = "theta_H"
    w.name, b.name = f"{head.name}.generated_weight", f"{head.name}.generated_bias"
    return w, b


class HyperLayer(Module):
    """Base for layers whose weight and bias come from the tabular input."""

    kind = None

    def _setup(self, name, weight_shape, bias_len, fan_in, d, embed_dim, embed_hidden, activation, seed):
        self.name = name
        self.embedding = EmbeddingNet(
            f"{name}.embedding", d, embed_dim, embed_hidden, activation, seed=seed
        )
        self.head = HyperHead(f"{name}.head", weight_shape, bias_len, embed_dim, fan_in,
                              seed=param_rng(seed, f"{name}.head"))
        self.generated_weight = Parameter(np.zeros(weight_shape), f"{name}.weight", "theta_H")
        self.generated_bias = Parameter(np.zeros(bias_len), f"{name}.bias", "theta_H")
        self.override = None
        self.var_e = 1.0

    def init_from_data(self, T_train, seed):
        """Standardize the embedding on training rows, then re-initialize the heads from its variance."""
        HyperInitSpec(self.head.d_j, self.head.d_k, embedding_variance(self.embedding, T_train))
        standardize_embedding(self.embedding, T_train)
        self.var_e = embedding_variance(self.embedding, T_train)
        spec = HyperInitSpec(self.head.d_j, self.head.d_k, self.var_e)
        init_heads(spec, self.head, param_rng(seed, f"{self.name}.head"))
        return spec

    def params_for(self, T_batch):
        if self.override is not None:
            w, b = self.override
            n = T.as_tensor(T_batch).shape[0]
            w = np.broadcast_to(np.asarray(w, float), (n,) + self.head.weight_shape)
            b = np.broadcast_to(np.asarray(b, float), (n, self.head.bias_len))
            return T.Tensor(w), T.Tensor(b)
        w, b = generate_params(embed(T_batch, self.embedding), self.head)
        self.generated_weight.data = w.data
        self.generated_bias.data = b.data
        self._last = (w, b)
        return w, b

    def __call__(self, x, T_batch):
        x, T_batch = T.as_tensor(x), T.as_tensor(T_batch)
        if T_batch.ndim != 2 or T_batch.shape[0] != x.shape[0]:
            raise ShapeError(f"{self.name} batch", x.shape, T_batch.shape)
        w, b = self.params_for(T_batch)
        return self._apply(x, w, b)


class HyperLinear(HyperLayer):
    kind = "linear"

    def __init__(self, name, in_features, out_features, d, embed_dim=1, embed_hidden=(),
                 activation="prelu", seed=0):
        self.in_features, self.out_features = in_features, out_features
        self._setup(name, (out_features, in_features), out_features, in_features,
                    d, embed_dim, embed_hidden, activation, seed)

    def _apply(self, x, w, b):
        return T.linear(x, w, b)


class HyperConv2d(HyperLayer):
    kind = "conv"

    def __init__(self, name, cin, cout, k=1, stride=1, padding=None, d=1, embed_dim=1,
                 embed_hidden=(), activation="prelu", seed=0):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.padding = k // 2 if padding is None else padding
        self._setup(name, (cout, cin, k, k), cout, cin * k * k,
                    d, embed_dim, embed_hidden, activation, seed)

    def _apply(self, x, w, b):
        return T.conv2d(x, w, b, self.stride, self.padding)


def hyper_forward(x, T_batch, layer):
    """Apply ``layer`` with per-sample parameters generated from each row of ``T_batch``."""
    return layer(x, T_batch)
