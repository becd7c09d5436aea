"""Synthetic image + tabular tasks with known Bayes-optimal predictors.

Regression: a disk of intensity ``s ~ U(0, 1)`` is drawn in the image and a
binary attribute ``a`` selects the line ``y = m_a s + b_a + noise``. A model
that sees only the image cannot tell the two lines apart.

Classification: the disk radius encodes ``u ~ U(0, 1)``; two tabular values
``v1, v2 ~ N(0, 1)`` and the image combine as

    class = [u > 0.5 xor v1 > 0] + [v2 > 0]        (3 classes)
    class = [u > 0.5 xor v1 > 0]                   (2 classes)

so neither modality alone gets close to the joint accuracy. ``v1_proxy`` is
a noisy copy of ``v1``, which makes imputation of masked ``v1`` cells useful.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .fileio import atomic_write_bytes, dumps_json
from .tabular import TabularSchema

REG_LINES = {0: (10.0, 20.0), 1: (14.0, 18.0)}
SEX_LEVELS = ("M", "F")
EDU_LEVELS = ("low", "mid", "high")
PROXY_NOISE = 0.5
IMAGE_MAGIC = b"HFIMG\x00\x00\x00"
IMAGE_VERSION = 1


@dataclass
class SynthTaskSpec:
    kind: str = "cond-classification"
    n: int = 600
    image_size: int = 32
    noise: float = 0.1
    d: int | None = None
    missing_rate: float = 0.0
    n_classes: int = 3
    class_proportions: tuple | None = None
    pixel_noise: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("cond-regression", "cond-classification"):
            raise ValueError(f"unknown synthetic task {self.kind!r}")
        if not 0 <= self.missing_rate <= 0.5:
            raise ValueError("missing rate must lie in [0, 0.5]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n < 1 or self.image_size < 16:
            raise ValueError("need n >= 1 and image_size >= 16")
        reg = self.kind == "cond-regression"
        if self.d is None:
            self.d = 1 if reg else 9
        if reg and self.missing_rate:
            raise ValueError("missing values are only generated for classification")
        if not reg:
            if self.n_classes not in (2, 3):
                raise ValueError("classification supports 2 or 3 classes")
            if self.d < 6:
                raise ValueError("classification needs d >= 6 attributes")
        if self.class_proportions is not None:
            p = np.asarray(self.class_proportions, dtype=float)
            if reg or len(p) != self.n_classes or (p <= 0).any():
                raise ValueError("class_proportions must give one positive value per class")
            self.class_proportions = tuple(float(v) for v in p / p.sum())
        if self.pixel_noise is None:
            self.pixel_noise = 0.02 if reg else 0.1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GeneratedDataset:
    task: str
    images: np.ndarray
    rows: list
    targets: np.ndarray
    latents: dict
    schema: TabularSchema
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.targets)

    def subset(self, idx):
        idx = np.asarray(idx)
        return GeneratedDataset(
            self.task,
            self.images[idx],
            [self.rows[i] for i in idx],
            self.targets[idx],
            {k: v[idx] for k, v in self.latents.items()},
            self.schema,
            self.metadata,
        )

    def strata(self):
        """Keys for stratified splitting: label (or target tercile) joined with sex."""
        if self.task == "classification":
            lab = self.targets.astype(int).astype(str)
        else:
            q = np.quantile(self.targets, [1 / 3, 2 / 3])
            lab = np.digitize(self.targets, q).astype(str)
        sex = np.array([str(r.get("sex", "")) for r in self.rows])
        return np.char.add(np.char.add(lab, "|"), sex)


def _disk(n, size, radius, center_jitter, rng):
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    c = (size - 1) / 2 + rng.uniform(-center_jitter, center_jitter, (n, 2))
    r = np.broadcast_to(np.asarray(radius, dtype=np.float64), (n,))
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    return (d2 <= r[:, None, None] ** 2).astype(np.float64)


def _noise_names(count):
    return [f"noise{i + 1}" for i in range(count)]


def gen_cond_regression(spec):
    rng = np.random.default_rng([spec.seed, 1])
    n, size = spec.n, spec.image_size
    s = rng.uniform(0.0, 1.0, n)
    a = rng.integers(0, 2, n)
    eps = rng.normal(0.0, spec.noise, n) if spec.noise > 0 else np.zeros(n)
    m = np.where(a == 1, REG_LINES[1][0], REG_LINES[0][0])
    b = np.where(a == 1, REG_LINES[1][1], REG_LINES[0][1])
    y = m * s + b + eps
    images = _disk(n, size, size * 0.19, size * 0.12, rng) * s[:, None, None]
    images += rng.normal(0.0, spec.pixel_noise, images.shape)
    extra = _noise_names(spec.d - 1)
    extra_vals = rng.normal(0.0, 1.0, (n, len(extra)))
    rows = []
    for i in range(n):
        row = {"sex": SEX_LEVELS[a[i]]}
        row.update({k: float(extra_vals[i, j]) for j, k in enumerate(extra)})
        rows.append(row)
    schema = TabularSchema(
        [{"name": "sex", "kind": "binary", "levels": list(SEX_LEVELS)}]
        + [{"name": k, "kind": "continuous"} for k in extra]
    )
    meta = {
        "spec": spec.to_dict(),
        "task": "regression",
        "lines": {str(k): list(v) for k, v in REG_LINES.items()},
        "blind_gap": attribute_blind_gap(spec.noise),
        "joint_oracle_mae": spec.noise * np.sqrt(2 / np.pi),
    }
    return GeneratedDataset("regression", images, rows, y, {"s": s, "a": a}, schema, meta)


def attribute_blind_gap(sigma):
    """MAE of the best image-only predictor, by numerical integration over s.

    With the two lines averaged, the residual is +-(2s - 1) + noise for either
    attribute value, so the gap is the integral over s of E|2s - 1 + noise|.
    """
    if sigma == 0:
        return 0.5

    def folded_mean(s):
        mu = 2 * s - 1
        return sigma * np.sqrt(2 / np.pi) * np.exp(-(mu**2) / (2 * sigma**2)) + mu * (1 - 2 * norm.cdf(-mu / sigma))

    return float(integrate.quad(folded_mean, 0.0, 1.0, points=[0.5])[0])


def _class_rule(u, v1, v2, n_classes):
    x1 = ((u > 0.5) != (v1 > 0)).astype(int)
    return x1 + (v2 > 0).astype(int) if n_classes == 3 else x1


def _base_prior(n_classes):
    return np.array([0.25, 0.5, 0.25]) if n_classes == 3 else np.array([0.5, 0.5])


def gen_cond_classification(spec):
    rng = np.random.default_rng([spec.seed, 2])
    C = spec.n_classes
    base = _base_prior(C)
    if spec.class_proportions is None:
        counts = None
        pool = spec.n
    else:
        p = np.asarray(spec.class_proportions)
        counts = np.floor(p * spec.n).astype(int)
        counts[np.argsort(-(p * spec.n - counts))[: spec.n - counts.sum()]] += 1
        pool = int(np.ceil(spec.n * (p / base).max() * 1.3)) + 64
    while True:
        u = rng.uniform(0.0, 1.0, pool)
        v1 = rng.normal(0.0, 1.0, pool)
        v2 = rng.normal(0.0, 1.0, pool)
        y = _class_rule(u, v1, v2, C)
        if counts is None:
            keep = np.arange(pool)
            break
        picks = [np.flatnonzero(y == c)[: counts[c]] for c in range(C)]
        if all(len(pk) == counts[c] for c, pk in enumerate(picks)):
            keep = np.sort(np.concatenate(picks))
            break
        pool *= 2
    u, v1, v2, y = u[keep], v1[keep], v2[keep], y[keep]
    n, size = spec.n, spec.image_size
    proxy = v1 + rng.normal(0.0, PROXY_NOISE, n)
    age = rng.normal(70.0, 8.0, n)
    edu = rng.integers(0, 3, n)
    sex = rng.integers(0, 2, n)
    extra = _noise_names(spec.d - 6)
    extra_vals = rng.normal(0.0, 1.0, (n, len(extra)))
    masked = rng.uniform(size=n) < spec.missing_rate
    radius = size * (0.09 + 0.25 * u)
    images = _disk(n, size, radius, size * 0.08, rng)
    images += rng.normal(0.0, spec.pixel_noise, images.shape)
    rows = []
    for i in range(n):
        row = {
            "v1": None if masked[i] else float(v1[i]),
            "v2": float(v2[i]),
            "v1_proxy": float(proxy[i]),
            "age": float(age[i]),
            "education": EDU_LEVELS[edu[i]],
            "sex": SEX_LEVELS[sex[i]],
        }
        row.update({k: float(extra_vals[i, j]) for j, k in enumerate(extra)})
        rows.append(row)
    schema = TabularSchema(
        [{"name": k, "kind": "continuous"} for k in ("v1", "v2", "v1_proxy", "age")]
        + [
            {"name": "education", "kind": "categorical", "levels": list(EDU_LEVELS)},
            {"name": "sex", "kind": "binary", "levels": list(SEX_LEVELS)},
        ]
        + [{"name": k, "kind": "continuous"} for k in extra]
    )
    prior = base if spec.class_proportions is None else np.asarray(spec.class_proportions)
    meta = {
        "spec": spec.to_dict(),
        "task": "classification",
        "n_classes": C,
        "rule": "class = [u>0.5 xor v1>0]" + (" + [v2>0]" if C == 3 else ""),
        "base_prior": base.tolist(),
        "class_prior": prior.tolist(),
        "proxy_noise": PROXY_NOISE,
    }
    ds = GeneratedDataset(
        "classification", images, rows, y,
        {"u": u, "v1": v1, "v2": v2, "v1_masked": masked.astype(int)}, schema, meta,
    )
    for mode in ("joint", "image-only", "tabular-only"):
        _, score = oracle_predict(ds, mode)
        meta[f"oracle_{mode}"] = score
    return ds


def generate(spec):
    if spec.kind == "cond-regression":
        return gen_cond_regression(spec)
    return gen_cond_classification(spec)


# -- oracles


def _posterior_bits(ds, mode):
    """P(x1 = 1) and P(x2 = 1) for each sample under the given information set."""
    lat = ds.latents
    u, v1, v2 = lat["u"], lat["v1"], lat["v2"]
    n = len(u)
    masked = lat["v1_masked"].astype(bool)
    proxy = np.array([r["v1_proxy"] for r in ds.rows])
    tau = ds.metadata["proxy_noise"]
    p_v1 = np.where(v1 > 0, 1.0, 0.0)
    p_v1_proxy = norm.cdf(proxy / (tau * np.sqrt(1 + tau**2)))
    p_v1 = np.where(masked, p_v1_proxy, p_v1)
    u_hi = (u > 0.5).astype(float)
    if mode == "joint":
        px1 = u_hi * (1 - p_v1) + (1 - u_hi) * p_v1
        px2 = (v2 > 0).astype(float)
    elif mode == "image-only":
        px1 = np.full(n, 0.5)
        px2 = np.full(n, 0.5)
    elif mode == "tabular-only":
        px1 = np.full(n, 0.5)
        px2 = (v2 > 0).astype(float)
    else:
        raise ValueError(f"unknown oracle mode {mode!r}")
    return px1, px2


def oracle_predict(ds, mode="joint"):
    """Bayes-optimal predictions given ``mode`` in {joint, image-only, tabular-only}.

    Regression returns (predictions, MAE). Classification returns
    (class probabilities, {"accuracy", "ba"}); the image is taken to reveal its
    latent exactly.
    """
    meta = ds.metadata
    if not meta or "task" not in meta:
        raise ValueError("dataset has no generation metadata")
    if ds.task == "regression":
        s, a = ds.latents["s"], ds.latents["a"]
        lines = {int(k): v for k, v in meta["lines"].items()}
        m = np.where(a == 1, lines[1][0], lines[0][0])
        b = np.where(a == 1, lines[1][1], lines[0][1])
        if mode == "joint":
            pred = m * s + b
        elif mode == "image-only":
            pm = (lines[0][0] + lines[1][0]) / 2
            pb = (lines[0][1] + lines[1][1]) / 2
            pred = pm * s + pb
        elif mode == "tabular-only":
            pred = m * 0.5 + b
        else:
            raise ValueError(f"unknown oracle mode {mode!r}")
        return pred, float(np.abs(ds.targets - pred).mean())
    C = meta["n_classes"]
    px1, px2 = _posterior_bits(ds, mode)
    if C == 3:
        post = np.stack([(1 - px1) * (1 - px2), px1 * (1 - px2) + (1 - px1) * px2, px1 * px2], axis=1)
    else:
        post = np.stack([1 - px1, px1], axis=1)
    # reweight by the retained class proportions relative to the generating prior
    ratio = np.asarray(meta["class_prior"]) / np.asarray(meta["base_prior"])
    post = post * ratio
    post /= post.sum(axis=1, keepdims=True)
    from .metrics import balanced_accuracy, confusion_matrix

    pred = post.argmax(axis=1)
    y = ds.targets.astype(int)
    cm = confusion_matrix(y, pred, C)
    ba = balanced_accuracy(cm) if (cm.sum(axis=1) > 0).all() else float("nan")
    return post, {"accuracy": float((pred == y).mean()), "ba": ba}


# -- files


def write_images(path, images, dtype="<f8"):
    images = np.ascontiguousarray(images, dtype=np.dtype(dtype))
    n, h, w = images.shape
    header = IMAGE_MAGIC + struct.pack("<HIII", IMAGE_VERSION, n, h, w) + dtype.encode().ljust(8, b"\x00")
    atomic_write_bytes(path, header + images.tobytes())


def read_images(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not an image container")
    version, n, h, w = struct.unpack("<HIII", raw[8:22])
    if version != IMAGE_VERSION:
        raise ValueError(f"{path}: unsupported image container version {version}")
    dtype = np.dtype(raw[22:30].rstrip(b"\x00").decode())
    data = np.frombuffer(raw[30:], dtype=dtype)
    if data.size != n * h * w:
        raise ValueError(f"{path}: truncated image data")
    return data.reshape(n, h, w).astype(np.float64)


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_dataset(ds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_images(os.path.join(out_dir, "images.bin"), ds.images)
    names = ds.schema.names
    lines = ["id," + ",".join(names)]
    for i, r in enumerate(ds.rows):
        lines.append(f"{i}," + ",".join(_csv_value(r.get(k)) for k in names))
    atomic_write_bytes(os.path.join(out_dir, "tabular.csv"), ("\n".join(lines) + "\n").encode())
    tgt = ["id,target"] + [
        f"{i},{int(t)}" if ds.task == "classification" else f"{i},{float(t)!r}" for i, t in enumerate(ds.targets)
    ]
    atomic_write_bytes(os.path.join(out_dir, "targets.csv"), ("\n".join(tgt) + "\n").encode())
    lat_names = sorted(ds.latents)
    lat = ["id," + ",".join(lat_names)] + [
        f"{i}," + ",".join(repr(float(ds.latents[k][i])) for k in lat_names) for i in range(len(ds))
    ]
    atomic_write_bytes(os.path.join(out_dir, "latents.csv"), ("\n".join(lat) + "\n").encode())
    ds.schema.save(os.path.join(out_dir, "schema.json"))
    atomic_write_bytes(os.path.join(out_dir, "metadata.json"), dumps_json(ds.metadata).encode())


def load_dataset(data_dir):
    import csv

    from .tabular import is_missing

    images = read_images(os.path.join(data_dir, "images.bin"))
    schema = TabularSchema.load(os.path.join(data_dir, "schema.json"))
    with open(os.path.join(data_dir, "metadata.json")) as f:
        meta = json.load(f)
    rows = []
    with open(os.path.join(data_dir, "tabular.csv"), newline="") as f:
        for r in csv.DictReader(f):
            row = {}
            for c in schema.columns:
                v = r[c.name]
                row[c.name] = None if is_missing(v) else (float(v) if c.kind == "continuous" else v)
            rows.append(row)
    task = meta.get("task", "classification")
    with open(os.path.join(data_dir, "targets.csv"), newline="") as f:
        tv = [r["target"] for r in csv.DictReader(f)]
    targets = np.array([int(v) for v in tv]) if task == "classification" else np.array([float(v) for v in tv])
    latents = {}
    lat_path = os.path.join(data_dir, "latents.csv")
    if os.path.exists(lat_path):
        with open(lat_path, newline="") as f:
            recs = list(csv.DictReader(f))
        for k in (recs[0].keys() if recs else []):
            if k != "id":
                latents[k] = np.array([float(r[k]) for r in recs])
        for k in ("a", "v1_masked"):
            if k in latents:
                latents[k] = latents[k].astype(int)
    if len(images) != len(rows) or len(rows) != len(targets):
        raise ValueError(f"{data_dir}: images, tabular rows and targets differ in count")
    return GeneratedDataset(task, images, rows, targets, latents, schema, meta)
