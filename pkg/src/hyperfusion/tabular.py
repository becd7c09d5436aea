"""Schema-driven encoding of tabular attributes and iterative ridge imputation.

Continuous columns are standardized with training statistics; binary and
categorical columns become one-hot blocks. Missing cells are filled by
regressing each column on all the others (chained equations with a ridge
regressor), and a 0/1 indicator column is appended for every original
column that had missing values.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fileio import atomic_write_bytes, dumps_json

KINDS = ("continuous", "binary", "categorical")
RIDGE_LAMBDA = 1e-3
MISSING_TOKENS = ("", "nan")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    levels: tuple = ()

    @property
    def width(self):
        return 1 if self.kind == "continuous" else len(self.levels)


class TabularSchema:
    def __init__(self, columns):
        cols = []
        for c in columns:
            if isinstance(c, dict):
                kind = c.get("kind")
                levels = c.get("levels") or ()
                if kind == "binary" and not levels:
                    levels = ("0", "1")
                c = Column(c["name"], kind, tuple(str(v) for v in levels))
            cols.append(c)
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        for c in cols:
            if c.kind not in KINDS:
                raise SchemaError(f"column {c.name!r}: unknown kind {c.kind!r}")
            if c.kind == "categorical" and len(c.levels) < 2:
                raise SchemaError(f"column {c.name!r}: categorical needs >= 2 levels")
            if c.kind == "binary" and len(c.levels) != 2:
                raise SchemaError(f"column {c.name!r}: binary needs exactly 2 levels")
            if len(set(c.levels)) != len(c.levels):
                raise SchemaError(f"column {c.name!r}: duplicate levels")
        self.columns = tuple(cols)

    def __eq__(self, other):
        return isinstance(other, TabularSchema) and self.columns == other.columns

    @property
    def names(self):
        return [c.name for c in self.columns]

    def column(self, name):
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def encoded_names(self):
        out = []
        for c in self.columns:
            if c.kind == "continuous":
                out.append(c.name)
            else:
                out.extend(f"{c.name}={lv}" for lv in c.levels)
        return out

    def blocks(self):
        out, start = {}, 0
        for c in self.columns:
            out[c.name] = (start, start + c.width)
            start += c.width
        return out

    def to_dict(self):
        return {
            "columns": [
                {"name": c.name, "kind": c.kind, **({"levels": list(c.levels)} if c.levels else {})}
                for c in self.columns
            ]
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["columns"])

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        atomic_write_bytes(path, dumps_json(self.to_dict()).encode())


@dataclass
class TabularMatrix:
    """Encoded rows; ``missing`` marks cells absent before imputation."""

    values: np.ndarray
    missing: np.ndarray
    columns: list
    blocks: dict
    indicators: np.ndarray = None
    indicator_names: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.values.shape != self.missing.shape or self.values.ndim != 2:
            raise SchemaError("values and missing mask must be equal-shape 2-D arrays")
        if self.values.shape[1] != len(self.columns):
            raise SchemaError("column names do not match value width")
        if self.indicators is None:
            self.indicators = np.zeros((len(self.values), 0))

    @classmethod
    def from_array(cls, values, names=None):
        """Continuous-only matrix; NaN entries are missing."""
        values = np.asarray(values, dtype=np.float64)
        names = list(names) if names is not None else [f"x{i}" for i in range(values.shape[1])]
        missing = np.isnan(values)
        return cls(np.where(missing, np.nan, values), missing, names, {n: (i, i + 1) for i, n in enumerate(names)})

    @property
    def n_rows(self):
        return self.values.shape[0]

    def full(self):
        """Values with indicator columns appended, the model's T."""
        return np.concatenate([self.values, self.indicators], axis=1)

    @property
    def full_names(self):
        return list(self.columns) + list(self.indicator_names)


@dataclass
class EncodingStats:
    mean: dict
    std: dict

    def to_dict(self):
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["mean"]), dict(d["std"]))


def is_missing(v):
    if v is None:
        return True
    if isinstance(v, float):
        return math.isnan(v)
    if isinstance(v, str):
        return v.strip().lower() in MISSING_TOKENS
    return False


def _level_key(v):
    if isinstance(v, float) and v.is_integer():
        v = int(v)
    return str(v).strip()


def encode(schema, rows, stats=None):
    """Encode raw rows (dicts keyed by column name). Returns (TabularMatrix, EncodingStats).

    Without ``stats`` the continuous means and standard deviations are fitted on
    these rows (training split); otherwise the given statistics are applied.
    """
    n = len(rows)
    names = schema.encoded_names()
    blocks = schema.blocks()
    values = np.zeros((n, len(names)))
    missing = np.zeros((n, len(names)), dtype=bool)
    fit = stats is None
    if fit:
        stats = EncodingStats({}, {})
    for c in schema.columns:
        lo, hi = blocks[c.name]
        raw = [r.get(c.name) for r in rows]
        miss = np.array([is_missing(v) for v in raw], dtype=bool)
        missing[:, lo:hi] = miss[:, None]
        if c.kind == "continuous":
            x = np.array([np.nan if m else float(v) for v, m in zip(raw, miss)])
            if fit:
                obs = x[~miss]
                if obs.size == 0:
                    raise SchemaError(f"column {c.name!r}: no observed values to fit statistics")
                stats.mean[c.name] = float(obs.mean())
                stats.std[c.name] = float(obs.std())
            mu, sd = stats.mean[c.name], stats.std[c.name]
            if sd <= 1e-12 * max(1.0, abs(mu)):
                if fit:
                    warnings.warn(f"column {c.name!r} has zero variance; encoded as zeros", stacklevel=2)
                col = np.zeros(n)
            else:
                col = (x - mu) / sd
            values[:, lo] = np.where(miss, np.nan, col)
        else:
            index = {lv: j for j, lv in enumerate(c.levels)}
            for i, (v, m) in enumerate(zip(raw, miss)):
                if m:
                    values[i, lo:hi] = np.nan
                    continue
                key = _level_key(v)
                if key not in index:
                    raise SchemaError(f"column {c.name!r}: unknown level {key!r} (known: {list(c.levels)})")
                values[i, lo + index[key]] = 1.0
    return TabularMatrix(values, missing, names, blocks), stats


# -- imputation


@dataclass
class ImputationModel:
    columns: list
    blocks: dict
    order: list
    coef: dict
    fill: np.ndarray
    categorical: dict
    sweeps: int
    ridge: float = RIDGE_LAMBDA
    with_indicators: bool = True

    @property
    def indicator_names(self):
        return [f"{name}__missing" for name in self.order] if self.with_indicators else []

    def to_dict(self):
        return {
            "columns": list(self.columns),
            "blocks": {k: list(v) for k, v in self.blocks.items()},
            "order": list(self.order),
            "coef": {k: np.asarray(v).tolist() for k, v in self.coef.items()},
            "fill": self.fill.tolist(),
            "categorical": dict(self.categorical),
            "sweeps": self.sweeps,
            "ridge": self.ridge,
            "with_indicators": self.with_indicators,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            list(d["columns"]),
            {k: tuple(v) for k, v in d["blocks"].items()},
            list(d["order"]),
            {k: np.asarray(v, dtype=np.float64) for k, v in d["coef"].items()},
            np.asarray(d["fill"], dtype=np.float64),
            dict(d["categorical"]),
            int(d["sweeps"]),
            float(d["ridge"]),
            bool(d["with_indicators"]),
        )


def _ridge_fit(A, Y, lam):
    """Ridge with an unpenalized intercept column appended to A."""
    A1 = np.concatenate([A, np.ones((A.shape[0], 1))], axis=1)
    pen = np.full(A1.shape[1], lam)
    pen[-1] = 0.0
    G = A1.T @ A1 + np.diag(pen)
    return np.linalg.lstsq(G, A1.T @ Y, rcond=None)[0]


def _ridge_predict(A, coef):
    return A @ coef[:-1] + coef[-1]


def _others(X, lo, hi):
    return np.concatenate([X[:, :lo], X[:, hi:]], axis=1)


def _fill_block(X, rows, lo, hi, pred, categorical):
    if categorical:
        onehot = np.zeros_like(pred)
        onehot[np.arange(len(pred)), pred.argmax(axis=1)] = 1.0
        pred = onehot
    X[rows, lo:hi] = pred


def impute(matrix, sweeps=5, seed=0, ridge=RIDGE_LAMBDA, indicators=True):
    """Chained ridge imputation. Returns (completed TabularMatrix, ImputationModel).

    Missing cells start at their column mean. Each sweep visits the original
    columns in schema order; a column with missing cells is regressed on all
    other encoded columns using the rows where it was observed, and only its
    missing cells are overwritten. The procedure has no random component;
    ``seed`` is accepted for interface uniformity.
    """
    del seed
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    X = matrix.values.copy()
    M = matrix.missing
    if np.isnan(X[~M]).any():
        raise SchemaError("observed cells contain NaN")
    fill = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        obs = ~M[:, j]
        if not obs.any():
            name = next(k for k, (lo, hi) in matrix.blocks.items() if lo <= j < hi)
            raise SchemaError(f"column {name!r} is entirely missing")
        fill[j] = X[obs, j].mean()
        X[M[:, j], j] = fill[j]
    order = [name for name, (lo, hi) in matrix.blocks.items() if M[:, lo:hi].any()]
    categorical = {name: (matrix.blocks[name][1] - matrix.blocks[name][0]) > 1 for name in order}
    coef = {}
    for _ in range(sweeps):
        for name in order:
            lo, hi = matrix.blocks[name]
            miss_rows = M[:, lo]
            A = _others(X, lo, hi)
            coef[name] = _ridge_fit(A[~miss_rows], X[~miss_rows, lo:hi], ridge)
            pred = _ridge_predict(A[miss_rows], coef[name])
            _fill_block(X, miss_rows, lo, hi, pred, categorical[name])
    model = ImputationModel(list(matrix.columns), dict(matrix.blocks), order, coef, fill, categorical,
                            sweeps, ridge, indicators)
    return _with_indicators(matrix, X, model), model


def _with_indicators(matrix, X, model):
    if model.with_indicators:
        ind = np.stack([matrix.missing[:, matrix.blocks[n][0]] for n in model.order], axis=1).astype(float) \
            if model.order else np.zeros((matrix.n_rows, 0))
    else:
        ind = np.zeros((matrix.n_rows, 0))
    return TabularMatrix(X, matrix.missing.copy(), list(matrix.columns), dict(matrix.blocks), ind,
                         model.indicator_names)


def apply_imputation(model, matrix):
    """Complete new rows with a fitted model: mean fill, then one pass in fitted column order."""
    if list(matrix.columns) != list(model.columns):
        raise SchemaError("encoded columns differ from those the imputer was fitted on")
    X = matrix.values.copy()
    M = matrix.missing
    for name, (lo, hi) in matrix.blocks.items():
        if M[:, lo:hi].any() and name not in model.coef:
            raise SchemaError(f"column {name!r} has missing cells but no fitted imputer (schema drift)")
    X[M] = np.broadcast_to(model.fill, X.shape)[M]
    for name in model.order:
        lo, hi = model.blocks[name]
        miss_rows = M[:, lo]
        if miss_rows.any():
            pred = _ridge_predict(_others(X, lo, hi)[miss_rows], model.coef[name])
            _fill_block(X, miss_rows, lo, hi, pred, model.categorical[name])
    return _with_indicators(matrix, X, model)


# -- CSV


def read_csv(path):
    """Header and rows (dicts of strings) from a CSV with a header row."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return list(reader.fieldnames or []), [dict(r) for r in reader]


def write_matrix_csv(path, names, values):
    lines = [",".join(names)]
    for row in np.asarray(values):
        lines.append(",".join(repr(float(v)) for v in row))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


class Preprocessor:
    """Encoding statistics and imputer fitted on training rows, reusable on any split."""

    def __init__(self, schema, sweeps=5, indicators=True):
        self.schema = schema
        self.sweeps = sweeps
        self.indicators = indicators
        self.stats = None
        self.imputer = None

    def fit(self, rows):
        matrix, self.stats = encode(self.schema, rows)
        completed, self.imputer = impute(matrix, self.sweeps, indicators=self.indicators)
        return completed.full()

    def transform(self, rows):
        if self.stats is None:
            raise RuntimeError("preprocessor is not fitted")
        matrix, _ = encode(self.schema, rows, self.stats)
        return apply_imputation(self.imputer, matrix).full()

    @property
    def feature_names(self):
        return list(self.imputer.columns) + self.imputer.indicator_names

    @property
    def width(self):
        return len(self.feature_names)

    def to_dict(self):
        return {
            "schema": self.schema.to_dict(),
            "sweeps": self.sweeps,
            "indicators": self.indicators,
            "stats": self.stats.to_dict(),
            "imputer": self.imputer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        pre = cls(TabularSchema.from_dict(d["schema"]), d["sweeps"], d["indicators"])
        pre.stats = EncodingStats.from_dict(d["stats"])
        pre.imputer = ImputationModel.from_dict(d["imputer"])
        return pre
