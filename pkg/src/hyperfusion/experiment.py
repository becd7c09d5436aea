"""Cross-validation protocol: split seeds x folds x initialization versions x variants."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fileio import read_json, write_csv, write_json
from .metrics import classification_report, regression_report
from .models import ModelSpec, build_model, save_checkpoint
from .synth import SynthTaskSpec, generate, load_dataset
from .tabular import Preprocessor
from .training import ArrayData, TrainConfig, stratified_kfold, train


@dataclass
class ExperimentConfig:
    variants: list
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    impute: dict = field(default_factory=dict)
    data: str | None = None
    synth: dict | None = None
    out: str = "runs"

    def __post_init__(self):
        if (self.data is None) == (self.synth is None):
            raise ValueError("experiment needs exactly one of 'data' (directory) or 'synth' (task spec)")
        if not self.variants:
            raise ValueError("experiment lists no variants")
        self.split = {"k": 5, "split_seeds": [0], "versions": [0], "folds": None, **self.split}
        if self.split["k"] < 3:
            raise ValueError("k must be >= 3 (one fold each for test and validation)")

    @classmethod
    def load(cls, path):
        d = read_json(path)
        base = os.path.dirname(os.path.abspath(path))
        for key in ("data", "out"):
            if d.get(key) and not os.path.isabs(d[key]):
                d[key] = os.path.join(base, d[key])
        cfg = cls(**d)
        if cfg.data is not None and not os.path.isdir(cfg.data):
            raise FileNotFoundError(f"data directory {cfg.data} does not exist")
        return cfg


def load_experiment_data(cfg):
    if cfg.data is not None:
        return load_dataset(cfg.data)
    return generate(SynthTaskSpec.from_dict(cfg.synth))


def run_seed(split_seed, fold, version):
    """Seed for one run's initialization and sampling, derived from its protocol coordinates."""
    return int(np.random.SeedSequence([split_seed, fold, version]).generate_state(1)[0] & 0x7FFFFFFF)


def fit_variant(ds, train_idx, val_idx, test_idx, variant, seed, train_cfg, model_overrides=None,
                impute_cfg=None):
    """Preprocess on the training rows, train one variant, evaluate on test rows.

    Returns (model, history, test report, preprocessor).
    """
    impute_cfg = impute_cfg or {}
    pre = Preprocessor(ds.schema, impute_cfg.get("sweeps", 5), impute_cfg.get("indicators", True))
    pre.fit([ds.rows[i] for i in train_idx])

    def arrays(idx):
        return ArrayData(ds.images[idx], pre.transform([ds.rows[i] for i in idx]), ds.targets[idx])

    tr, va, te = arrays(train_idx), arrays(val_idx), arrays(test_idx)
    task = ds.task
    spec = ModelSpec(
        task=task,
        variant=variant,
        n_classes=int(ds.metadata.get("n_classes", 3)) if task == "classification" else 3,
        image_shape=ds.images.shape[1:],
        tabular_width=pre.width,
        seed=seed,
        **(model_overrides or {}),
    )
    cfg = TrainConfig.from_dict({**train_cfg, "task": task, "seed": seed})
    model, history = train(build_model(spec), tr, va, cfg)
    pred = model.predict(te.images, te.tab)
    if task == "classification":
        report = classification_report(te.y, pred, spec.n_classes)
    else:
        report = regression_report(te.y, pred)
    val_rows = [r for r in history.rows if r["split"] == "val"]
    if val_rows:
        pick = max if task == "classification" else min
        report["val_best"] = pick(r["metric"] for r in val_rows)
    return model, history, report, pre


def _run_one(job):
    cfg, ds, plan_folds, s, f, v, variant = job
    k = cfg.split["k"]
    val_fold = (f + 1) % k
    te = np.flatnonzero(plan_folds == f)
    va = np.flatnonzero(plan_folds == val_fold)
    tr = np.flatnonzero((plan_folds != f) & (plan_folds != val_fold))
    seed = run_seed(s, f, v)
    model, history, report, pre = fit_variant(ds, tr, va, te, variant, seed, cfg.train, cfg.model, cfg.impute)
    run_dir = os.path.join(cfg.out, variant, f"split{s}", f"fold{f}", f"v{v}")
    os.makedirs(run_dir, exist_ok=True)
    extra = {
        "preprocessor": pre.to_dict(),
        "protocol": {"split_seed": s, "fold": f, "version": v, "seed": seed},
        "val_best": report.get("val_best"),
        "task": ds.task,
    }
    save_checkpoint(os.path.join(run_dir, "checkpoint.hfz"), model, extra)
    history.to_csv(os.path.join(run_dir, "history.csv"))
    write_json(os.path.join(run_dir, "metrics.json"), report)
    return {"variant": variant, "split_seed": s, "fold": f, "version": v, "dir": os.path.relpath(run_dir, cfg.out),
            **{m: report[m] for m in _summary_metrics(ds.task)}}


def _summary_metrics(task):
    return ["mae"] if task == "regression" else ["ba", "prc", "f1_macro", "auc_macro"]


def run_experiment(cfg, threads=1):
    """Train every (split seed, fold, version, variant) and write runs.csv / runs.json under ``cfg.out``."""
    ds = load_experiment_data(cfg)
    k = cfg.split["k"]
    folds = cfg.split["folds"] if cfg.split["folds"] is not None else list(range(k))
    jobs = []
    for s in cfg.split["split_seeds"]:
        plan = stratified_kfold(ds.strata(), k, s)
        for f in folds:
            for v in cfg.split["versions"]:
                for variant in cfg.variants:
                    jobs.append((cfg, ds, plan.folds, s, f, v, variant))
    os.makedirs(cfg.out, exist_ok=True)
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    metrics = _summary_metrics(ds.task)
    header = ["variant", "split_seed", "fold", "version", *metrics, "dir"]
    write_csv(os.path.join(cfg.out, "runs.csv"), header, [[r[h] for h in header] for r in rows])
    write_json(os.path.join(cfg.out, "runs.json"), {"task": ds.task, "metrics": metrics, "runs": rows})
    return rows


__all__ = ["ExperimentConfig", "fit_variant", "run_experiment", "run_seed"]
