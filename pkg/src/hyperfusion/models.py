"""The six fusion variants at toy 2-D scale, plus checkpoint I/O.

Regression uses a small VGG-style backbone (three conv blocks, then four
linear layers). Classification uses a pre-activation ResNet (stem, four
residual blocks, global average pool, two linear layers). Variants differ
only in how the tabular vector enters:

``image``        backbone alone
``tabular``      MLP on the tabular vector alone
``concat``       tabular vector concatenated to linear-layer inputs
``film``         per-channel scale/shift of the last block's maps, from T
``daft``         as film, generator also sees the pooled block features
``hyperfusion``  selected layers get their weights from hypernetworks
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .fileio import atomic_write_bytes
from .hypernet import HyperConv2d, HyperLayer, HyperLinear
from .nn import MLP, BatchNorm, Conv2d, Linear, Module

VARIANTS = ("image", "tabular", "concat", "film", "daft", "hyperfusion")
TASKS = ("regression", "classification")
CHECKPOINT_FORMAT = "hyperfusion-checkpoint"
CHECKPOINT_VERSION = 1

DEFAULT_HYPERLAYERS = {
    "regression": ("linear1", "linear2", "linear3", "final"),
    "classification": ("block4.downsample",),
}


class ModeError(RuntimeError):
    pass


@dataclass
class ModelSpec:
    task: str = "classification"
    variant: str = "hyperfusion"
    n_classes: int = 3
    image_shape: tuple = (32, 32)
    tabular_width: int = 12
    hyperlayers: tuple = ()
    channels: tuple = ()
    linear_widths: tuple = ()
    embed_dim: int | None = None
    embed_hidden: tuple | None = None
    conditioner_hidden: int = 16
    dropout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        reg = self.task == "regression"
        if not reg and self.n_classes not in (2, 3):
            raise ValueError("classification supports 2 or 3 classes")
        self.image_shape = tuple(self.image_shape)
        self.hyperlayers = tuple(self.hyperlayers)
        if self.variant == "hyperfusion" and not self.hyperlayers:
            self.hyperlayers = DEFAULT_HYPERLAYERS[self.task]
        if self.variant != "hyperfusion" and self.hyperlayers:
            raise ValueError("hyperlayer placement is only valid for the hyperfusion variant")
        self.channels = tuple(self.channels) or ((4, 8, 16) if reg else (4, 8, 16, 32))
        self.linear_widths = tuple(self.linear_widths) or ((32, 16, 8) if reg else (16,))
        if self.embed_dim is None:
            self.embed_dim = 1 if reg else min(8, self.tabular_width)
        if self.embed_hidden is None:
            self.embed_hidden = () if reg else (16,)
        self.embed_hidden = tuple(self.embed_hidden)
        h, w = self.image_shape
        min_side = 8 if reg else 16
        if h < min_side or w < min_side:
            raise ValueError(f"image side must be >= {min_side} for this backbone")

    @property
    def output_width(self):
        return 1 if self.task == "regression" else self.n_classes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("image_shape", "hyperlayers", "channels", "linear_widths", "embed_hidden"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


class PreActBlock(Module):
    """BN-ReLU-conv3x3-BN-ReLU-conv3x3 with a 1x1 strided shortcut conv when the shape changes."""

    def __init__(self, name, cin, cout, stride, model):
        self.name = name
        self.bn1 = BatchNorm(f"{name}.bn1", cin)
        self.conv1 = model._conv(f"{name}.conv1", cin, cout, 3, stride, bias=False)
        self.bn2 = BatchNorm(f"{name}.bn2", cout)
        self.conv2 = model._conv(f"{name}.conv2", cout, cout, 3, 1, bias=False)
        if stride != 1 or cin != cout:
            self.downsample = model._conv(f"{name}.downsample", cin, cout, 1, stride, bias=False, padding=0)
        else:
            self.downsample = None

    def __call__(self, x, Tb, training):
        a = T.relu(self.bn1(x, training))
        h = _apply(self.conv1, a, Tb)
        h = _apply(self.conv2, T.relu(self.bn2(h, training)), Tb)
        short = x if self.downsample is None else _apply(self.downsample, a, Tb)
        return h + short


def _apply(layer, x, Tb):
    return layer(x, Tb) if isinstance(layer, HyperLayer) else layer(x)


class FusionModel(Module):
    """One instantiated variant; holds parameters, buffers and the staged forward pass."""

    def __init__(self, spec):
        self.spec = spec
        self.mode = None
        self.rng = np.random.default_rng(spec.seed)
        self.layers = {}
        self.film_override = None
        self._used_hyper = set()
        reg = spec.task == "regression"
        if reg:
            self._buffers = {"target_mean": np.zeros(1), "target_std": np.ones(1)}
        if spec.variant == "tabular":
            self._build_tabular()
        elif reg:
            self._build_regression()
        else:
            self._build_classification()
        missing = set(spec.hyperlayers) - self._used_hyper
        if missing:
            raise ValueError(f"unknown hyperlayer positions {sorted(missing)}")

    # -- construction helpers

    def _hyper_kwargs(self):
        s = self.spec
        return dict(d=s.tabular_width, embed_dim=s.embed_dim, embed_hidden=s.embed_hidden, seed=s.seed)

    def _conv(self, name, cin, cout, k, stride=1, bias=True, padding=None):
        if name in self.spec.hyperlayers:
            self._used_hyper.add(name)
            layer = HyperConv2d(name, cin, cout, k, stride, padding, **self._hyper_kwargs())
        else:
            layer = Conv2d(name, cin, cout, k, stride, padding, bias=bias, seed=self.spec.seed)
        self.layers[name] = layer
        return layer

    def _linear(self, name, fin, fout):
        if name in self.spec.hyperlayers:
            self._used_hyper.add(name)
            layer = HyperLinear(name, fin, fout, **self._hyper_kwargs())
        else:
            layer = Linear(name, fin, fout, seed=self.spec.seed)
        self.layers[name] = layer
        return layer

    def _build_tabular(self):
        s = self.spec
        self.tab_mlp = MLP("tabular", [s.tabular_width, 16, 8, s.output_width], seed=s.seed)
        for layer in self.tab_mlp.layers:
            self.layers[layer.name] = layer
        self.stages = [("tabular", lambda h, Tb, tr: self.tab_mlp(Tb))]

    def _build_regression(self):
        s = self.spec
        cin = 1
        self.blocks = []
        for i, c in enumerate(s.channels, start=1):
            blk = {
                "a": self._conv(f"block{i}.conv_a", cin, c, 3),
                "b": self._conv(f"block{i}.conv_b", c, c, 3),
                "bn": BatchNorm(f"block{i}.bn", c),
            }
            self.blocks.append(blk)
            cin = c
        self._build_conditioner(cin)
        h, w = s.image_shape
        for _ in s.channels:
            h, w = h // 2, w // 2
        flat = cin * h * w
        extra = s.tabular_width if s.variant == "concat" else 0
        widths = [flat, *s.linear_widths, 1]
        names = [f"linear{i}" for i in range(1, len(widths) - 1)] + ["final"]
        n_fc = len(names)
        # concat: T joins the input of the second-to-last linear layer
        self.fcs = [
            self._linear(n, a + (extra if j == n_fc - 2 else 0), b)
            for j, (n, a, b) in enumerate(zip(names, widths[:-1], widths[1:]))
        ]
        self.stages = []
        for i, blk in enumerate(self.blocks, start=1):
            self.stages.append((f"block{i}", self._reg_block(blk)))
        self.stages.append(("flatten", self._flatten))
        for j, fc in enumerate(self.fcs):
            self.stages.append((fc.name, self._reg_linear(fc, j == n_fc - 1, j == n_fc - 2)))

    def _build_conditioner(self, channels):
        s = self.spec
        if s.variant == "film":
            self.conditioner = MLP("film", [s.tabular_width, s.conditioner_hidden, 2 * channels], seed=s.seed)
        elif s.variant == "daft":
            self.conditioner = MLP("daft", [s.tabular_width + channels, s.conditioner_hidden, 2 * channels],
                                   seed=s.seed)

    def _reg_block(self, blk):
        last = blk is self.blocks[-1]

        def run(h, Tb, training):
            h = T.relu(_apply(blk["a"], h, Tb))
            h = T.relu(_apply(blk["b"], h, Tb))
            h = blk["bn"](h, training)
            h = T.max_pool2d(h)
            if last and self.spec.variant in ("film", "daft"):
                h = self._modulate(h, Tb)
            return h

        return run

    def _flatten(self, h, Tb, training):
        h = T.dropout(h, self.spec.dropout, training, self.rng)
        return h.reshape(h.shape[0], -1)

    def _reg_linear(self, fc, last, concat_here):
        concat = self.spec.variant == "concat" and concat_here

        def run(h, Tb, training):
            if concat:
                h = T.concat([h, Tb], axis=1)
            h = _apply(fc, h, Tb)
            return h if last else T.relu(h)

        return run

    def _build_classification(self):
        s = self.spec
        c = s.channels
        self.stem = self._conv("stem.conv", 1, c[0], 3, bias=False)
        self.stem_bn = BatchNorm("stem.bn", c[0])
        self.blocks = []
        cin = c[0]
        for i, cout in enumerate(c, start=1):
            stride = 1 if i == 1 else 2
            self.blocks.append(PreActBlock(f"block{i}", cin, cout, stride, self))
            cin = cout
        self._build_conditioner(cin)
        extra = s.tabular_width if s.variant == "concat" else 0
        widths = [cin, *s.linear_widths, s.n_classes]
        self.fcs = [
            self._linear(f"fc{i}", a + (extra if i == len(widths) - 2 else 0), b)
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1)
        ]
        self.stages = [("stem", self._stem)]
        for blk in self.blocks:
            self.stages.append((blk.name, self._cls_block(blk)))
        self.stages.append(("pool", self._pool))
        for j, fc in enumerate(self.fcs):
            self.stages.append((fc.name, self._cls_linear(fc, j, len(self.fcs))))

    def _stem(self, h, Tb, training):
        h = _apply(self.stem, h, Tb)
        return T.max_pool2d(T.relu(self.stem_bn(h, training)))

    def _cls_block(self, blk):
        last = blk is self.blocks[-1]

        def run(h, Tb, training):
            h = blk(h, Tb, training)
            if last and self.spec.variant in ("film", "daft"):
                h = self._modulate(h, Tb)
            return h

        return run

    def film_params(self, feats, Tb):
        """Per-channel (gamma, beta) for the last block, shape (B, C) each."""
        if self.film_override is not None:
            n, c = feats.shape[0], feats.shape[1]
            g, b = self.film_override
            return T.Tensor(np.broadcast_to(g, (n, c))), T.Tensor(np.broadcast_to(b, (n, c)))
        if self.spec.variant == "daft":
            inp = T.concat([Tb, T.global_avg_pool2d(feats)], axis=1)
        else:
            inp = Tb
        out = self.conditioner(inp)
        c = feats.shape[1]
        gamma = 1.0 + out[:, :c]
        beta = out[:, c:]
        return gamma, beta

    def _modulate(self, h, Tb):
        gamma, beta = self.film_params(h, Tb)
        n, c = gamma.shape
        return h * gamma.reshape(n, c, 1, 1) + beta.reshape(n, c, 1, 1)

    def _pool(self, h, Tb, training):
        return T.global_avg_pool2d(h)

    def _cls_linear(self, fc, j, count):
        last = j == count - 1
        concat = self.spec.variant == "concat" and j == count - 2

        def run(h, Tb, training):
            h = T.dropout(h, self.spec.dropout, training, self.rng)
            if concat:
                h = T.concat([h, Tb], axis=1)
            h = _apply(fc, h, Tb)
            return h if last else T.relu(h)

        return run

    # -- public API

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    @property
    def training(self):
        if self.mode is None:
            raise ModeError("model mode unset: call train() or eval() before forward")
        return self.mode == "train"

    def hyperlayers(self):
        return [m for m in self.layers.values() if isinstance(m, HyperLayer)]

    def init_from_data(self, T_train, seed=None):
        """Set hypernetwork head scales from the embedding variance of training rows."""
        seed = self.spec.seed if seed is None else seed
        return [layer.init_from_data(T_train, seed) for layer in self.hyperlayers()]

    def stage_index(self, layer_name):
        prefix = layer_name.split(".")[0]
        for i, (name, _) in enumerate(self.stages):
            if name == prefix or (name == "stem" and prefix == "stem"):
                return i
        if self.spec.variant == "tabular":
            return 0
        raise KeyError(layer_name)

    def forward_from(self, start, h, Tb):
        training = self.training
        for _, fn in self.stages[start:]:
            h = fn(h, Tb, training)
        return h

    def forward(self, image, Tb, raw=False):
        """Prediction for a batch: (B,) in target units for regression, (B, C) probabilities otherwise."""
        self.training  # raises ModeError while the mode is unset
        x = T.as_tensor(image)
        Tb = T.as_tensor(Tb)
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        if x.shape[0] != Tb.shape[0]:
            raise T.ShapeError("forward batch", x.shape, Tb.shape)
        if Tb.shape[1] != self.spec.tabular_width:
            raise T.ShapeError("forward tabular", Tb.shape, (self.spec.tabular_width,))
        if self.spec.variant != "tabular" and tuple(x.shape[2:]) != self.spec.image_shape:
            raise T.ShapeError("forward image", x.shape, self.spec.image_shape)
        out = self.forward_from(0, x, Tb)
        if self.spec.task == "classification":
            return out if raw else T.softmax(out, axis=1)
        out = out.reshape(-1)
        if raw:
            return out
        return out * float(self._buffers["target_std"][0]) + float(self._buffers["target_mean"][0])

    __call__ = forward

    def predict(self, images, Tb, batch_size=256):
        """Eval-mode predictions as a numpy array, no tape."""
        prev = self.mode
        self.eval()
        outs = []
        with T.no_grad():
            for i in range(0, len(Tb), batch_size):
                outs.append(self.forward(images[i : i + batch_size], Tb[i : i + batch_size]).data)
        self.mode = prev
        return np.concatenate(outs, axis=0)

    def state_dict(self):
        state = {p.name: p.data.copy() for p in self.parameters()}
        for k, v in self.buffers().items():
            state[f"buffer:{k}"] = v.copy()
        return state

    def load_state_dict(self, state):
        params = {p.name: p for p in self.parameters()}
        bufs = self.buffers()
        for k, v in state.items():
            if k.startswith("buffer:"):
                target = bufs[k[len("buffer:"):]]
            elif k in params:
                target = params[k].data
            else:
                raise KeyError(f"unexpected state entry {k!r}")
            if target.shape != np.shape(v):
                raise T.ShapeError(f"load {k}", target.shape, np.shape(v))
            target[...] = v
        absent = set(params) - set(state)
        if absent:
            raise KeyError(f"state is missing parameters {sorted(absent)}")

    def buffers(self):
        out = dict(getattr(self, "_buffers", {}))
        for m in self.modules():
            if m is not self:
                out.update(getattr(m, "_buffers", {}))
        return out

    def children(self):
        yield from self.layers.values()
        for key in ("blocks",):
            for blk in getattr(self, key, []):
                if isinstance(blk, Module):
                    yield blk
                elif isinstance(blk, dict):
                    yield from (v for v in blk.values() if isinstance(v, Module))
        for key in ("stem_bn", "conditioner", "tab_mlp"):
            if hasattr(self, key):
                yield getattr(self, key)

    def parameter_store(self):
        """Every parameter by name, including generated (theta_H) slots."""
        return {p.name: p for p in self.parameters(include_generated=True)}


def build_model(spec):
    if isinstance(spec, dict):
        spec = ModelSpec.from_dict(spec)
    return FusionModel(spec)


def build_conditioning_baselines(spec):
    if isinstance(spec, dict):
        spec = ModelSpec.from_dict(spec)
    if spec.variant not in ("film", "daft"):
        raise ValueError(f"conditioning baseline must be film or daft, got {spec.variant!r}")
    return FusionModel(spec)


def audit_partitions(model):
    """Problems with the phi/theta_P/theta_H split; empty list when clean."""
    problems = []
    hyper_owned = set()
    for layer in model.hyperlayers():
        for p in layer.parameters(include_generated=True):
            hyper_owned.add(id(p))
    for p in model.parameters(include_generated=True):
        if p.partition == "theta_H":
            if id(p) not in hyper_owned:
                problems.append(f"{p.name}: theta_H outside a hyperlayer")
            if p.trainable or p.regularized:
                problems.append(f"{p.name}: theta_H marked trainable/regularized")
        elif p.partition == "phi" and id(p) not in hyper_owned:
            problems.append(f"{p.name}: phi parameter outside a hypernetwork")
    for p in model.parameters():
        if p.partition == "theta_H":
            problems.append(f"{p.name}: theta_H exposed to the optimizer")
    return problems


# -- checkpoints


def _json_bytes(obj):
    return json.dumps(obj, sort_keys=True, indent=1).encode()


def save_checkpoint(path, model, extra=None):
    """Zip container: manifest.json (format, version, spec, extra) plus one .npy per tensor."""
    state = model.state_dict()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "extra": extra or {},
        "tensors": sorted(state),
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", (1980, 1, 1, 0, 0, 0)), _json_bytes(manifest))
        for i, name in enumerate(sorted(state)):
            arr = io.BytesIO()
            np.save(arr, state[name], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"t{i:05d}.npy", (1980, 1, 1, 0, 0, 0)), arr.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    """Return (model, extra); the model is left in eval mode."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        state = {
            name: np.load(io.BytesIO(zf.read(f"t{i:05d}.npy")), allow_pickle=False)
            for i, name in enumerate(manifest["tensors"])
        }
    model = build_model(ModelSpec.from_dict(manifest["spec"]))
    model.load_state_dict(state)
    return model.eval(), manifest["extra"]
