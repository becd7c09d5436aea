"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 numerical failure.
Diagnostics go to standard error; machine-readable output goes to files or
standard output.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings

import numpy as np

from . import tensor as T
from .fileio import dumps_json, read_json, write_json

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def threads():
    raw = os.environ.get("HYPERFUSION_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HYPERFUSION_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _emit(obj, out):
    text = dumps_json(obj)
    if out:
        write_json(out, obj)
    else:
        sys.stdout.write(text)


# -- commands


def cmd_gen_data(args):
    from .synth import SynthTaskSpec, generate, save_dataset

    spec = read_json(args.spec)
    if args.seed is not None:
        spec["seed"] = args.seed
    ds = generate(SynthTaskSpec.from_dict(spec))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}", file=sys.stderr)


def cmd_impute(args):
    from .tabular import TabularSchema, encode, impute, read_csv, write_matrix_csv

    schema = TabularSchema.load(args.schema)
    header, rows = read_csv(args.inp)
    missing_cols = [c for c in schema.names if c not in header]
    if missing_cols:
        raise ValueError(f"CSV lacks schema columns {missing_cols}")
    matrix, stats = encode(schema, rows)
    completed, model = impute(matrix, args.sweeps, seed=args.seed or 0, indicators=not args.drop_indicators)
    os.makedirs(args.out, exist_ok=True)
    write_matrix_csv(os.path.join(args.out, "completed.csv"), completed.full_names, completed.full())
    write_json(os.path.join(args.out, "imputer.json"), model.to_dict())
    write_json(os.path.join(args.out, "encoding.json"), {"schema": schema.to_dict(), "stats": stats.to_dict()})


def cmd_train(args):
    from .experiment import ExperimentConfig, run_experiment

    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.split["split_seeds"] = [args.seed]
    if args.out:
        cfg.out = args.out
    rows = run_experiment(cfg, threads())
    print(f"trained {len(rows)} runs into {cfg.out}", file=sys.stderr)


def _data_batch(ds, pre, n):
    idx = np.arange(min(n, len(ds)))
    return ds.images[idx], pre.fit([ds.rows[i] for i in idx]), ds.targets[idx]


def cmd_select_layers(args):
    from .layer_select import LayerSelectConfig, candidate_layers, rank_layers
    from .models import ModelSpec, build_model
    from .synth import load_dataset
    from .tabular import Preprocessor

    spec = read_json(args.model_spec)
    cfg = LayerSelectConfig(args.trials, args.bins, args.batch, args.seed if args.seed is not None else 0)
    if args.data:
        ds = load_dataset(args.data)
    else:
        # no data given: a fixed synthetic batch for the model's task
        from .synth import SynthTaskSpec, generate

        kind = "cond-" + spec.get("task", "classification")
        ds = generate(SynthTaskSpec(kind=kind, n=cfg.batch_size, seed=0))
    pre = Preprocessor(ds.schema)
    images, tab, y = _data_batch(ds, pre, cfg.batch_size)
    spec.setdefault("task", ds.task)
    spec.setdefault("variant", "image")
    spec["image_shape"] = list(ds.images.shape[1:])
    spec["tabular_width"] = tab.shape[1]
    if ds.task == "classification":
        spec.setdefault("n_classes", int(ds.metadata.get("n_classes", 3)))
    model = build_model(ModelSpec.from_dict(spec))
    cands = args.layers.split(",") if args.layers else candidate_layers(model)
    report = rank_layers(model, cands, (images, tab, y), cfg)
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "layer_report.json"), report.to_dict())
    report.write_csv(os.path.join(args.out, "layer_report.csv"))


def _member_predictions(ckpt_path, ds, idx):
    from .models import load_checkpoint
    from .tabular import Preprocessor

    model, extra = load_checkpoint(ckpt_path)
    pre = Preprocessor.from_dict(extra["preprocessor"])
    tab = pre.transform([ds.rows[i] for i in idx])
    return model, extra, model.predict(ds.images[idx], tab)


def _report(task, y, pred, n_classes=None):
    from .metrics import classification_report, regression_report

    if task == "classification":
        return classification_report(y, pred, n_classes)
    return regression_report(y, pred)


def _subgroup(ds, expr):
    if not expr:
        return np.arange(len(ds))
    if "=" not in expr:
        raise UsageError("--subgroup expects attr=value")
    key, value = expr.split("=", 1)
    if key not in ds.schema.names:
        raise ValueError(f"unknown subgroup attribute {key!r}")
    idx = np.array([i for i, r in enumerate(ds.rows) if r.get(key) is not None and str(r[key]) == value], dtype=int)
    if idx.size == 0:
        raise ValueError(f"subgroup {expr!r} selects no rows")
    return idx


def cmd_evaluate(args):
    from .synth import load_dataset

    ds = load_dataset(args.data)
    idx = _subgroup(ds, args.subgroup)
    model, extra, pred = _member_predictions(args.checkpoint, ds, idx)
    rep = _report(model.spec.task, ds.targets[idx], pred, model.spec.output_width)
    rep["subgroup"] = args.subgroup
    _emit(rep, args.out)


def cmd_ensemble_eval(args):
    from .ensemble import combine_classification, combine_regression
    from .synth import load_dataset

    manifest = read_json(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    paths = [p if os.path.isabs(p) else os.path.join(base, p) for p in manifest["checkpoints"]]
    if not paths:
        raise ValueError("manifest lists no checkpoints")
    ds = load_dataset(args.data)
    idx = _subgroup(ds, args.subgroup)
    members, preds, tasks = [], [], set()
    for p in paths:
        model, extra, pred = _member_predictions(p, ds, idx)
        tasks.add(model.spec.task)
        members.append({"checkpoint": os.path.relpath(p, base), "val_best": extra.get("val_best"),
                        "model": model})
        preds.append(pred)
    if len(tasks) != 1:
        raise ValueError("ensemble members mix tasks")
    task = tasks.pop()
    top = manifest.get("select_top")
    if top:
        # best members by validation metric (MAE lower, BA higher)
        key = [m["val_best"] if m["val_best"] is not None else np.nan for m in members]
        order = np.argsort(key, kind="stable") if task == "regression" else np.argsort(-np.asarray(key), kind="stable")
        keep = sorted(order[:top])
        members = [members[i] for i in keep]
        preds = [preds[i] for i in keep]
    y = ds.targets[idx]
    width = members[0]["model"].spec.output_width
    out = {"task": task, "members": []}
    for m, p in zip(members, preds):
        out["members"].append({"checkpoint": m["checkpoint"], "metrics": _report(task, y, p, width)})
    if task == "regression":
        combined = combine_regression(preds)
        out["ensemble"] = _report(task, y, combined)
    else:
        combined, _ = combine_classification(preds)
        out["ensemble"] = _report(task, y, combined, width)
        out["ensemble_unweighted"] = _report(task, y, np.mean(preds, axis=0), width)
    _emit(out, args.out)


def grad_check_variant(variant, task, seed=0, max_entries=20):
    """Max relative gradient error of one variant on a 4-sample, 16x16 batch."""
    from .models import ModelSpec, build_model

    rng = np.random.default_rng(seed)
    d = 6
    spec = ModelSpec(task=task, variant=variant, n_classes=3, image_shape=(16, 16), tabular_width=d,
                     embed_dim=None if task == "regression" else 4, seed=seed)
    model = build_model(spec)
    model.init_from_data(rng.standard_normal((64, d)))
    model.train()
    images = rng.standard_normal((4, 16, 16))
    tab = rng.standard_normal((4, d))
    y = rng.standard_normal(4) if task == "regression" else np.array([0, 1, 2, 1])

    def loss_fn(images, tab):
        model.rng = np.random.default_rng(seed + 1)
        out = model(images, tab, raw=True)
        if task == "regression":
            diff = out - y
            return T.mean(diff * diff)
        logp = T.log(T.softmax(out, axis=1))
        onehot = np.eye(3)[y]
        return -T.mean(T.tsum(logp * onehot, axis=1))

    return T.grad_check(loss_fn, model.parameters(), inputs=[images, tab], eps=1e-5,
                        max_entries=max_entries, seed=seed)


def cmd_grad_check(args):
    from .models import VARIANTS

    variants = VARIANTS if args.variant == "all" else [args.variant]
    if args.variant not in VARIANTS and args.variant != "all":
        raise UsageError(f"unknown variant {args.variant!r}")
    tasks = ["regression", "classification"] if args.task == "both" else [args.task]
    results = {}
    for v in variants:
        for t in tasks:
            err = grad_check_variant(v, t, args.seed or 0, args.max_entries)
            if err is not None:
                results[f"{v}/{t}"] = err
    worst = max(results.values())
    _emit({"max_relative_error": worst, "tolerance": GRAD_TOL, "checks": results}, None)
    if not worst < GRAD_TOL:
        print(f"gradient check failed: {worst:.3e} >= {GRAD_TOL:g}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_report(args):
    from .report import write_report

    write_report(args.runs, args.out, charts=not args.no_charts)


def build_parser():
    p = _Parser(prog="hyperfusion", description="Tabular-conditioned hypernetwork fusion toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("impute", help="encode and impute a tabular CSV")
    g.add_argument("--in", dest="inp", required=True)
    g.add_argument("--schema", required=True)
    g.add_argument("--sweeps", type=int, default=5)
    g.add_argument("--drop-indicators", action="store_true")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_impute)

    g = sub.add_parser("train", help="run the cross-validation protocol from a JSON config")
    g.add_argument("--config", required=True)
    g.add_argument("--out")
    g.add_argument("--seed", type=int, help="single split seed overriding the config")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("select-layers", help="rank layers by loss entropy under re-initialization")
    g.add_argument("--model-spec", required=True)
    g.add_argument("--data", help="dataset directory (default: a fixed synthetic batch)")
    g.add_argument("--trials", type=int, default=1000)
    g.add_argument("--bins", type=int, default=50)
    g.add_argument("--batch", type=int, default=256)
    g.add_argument("--layers", help="comma-separated candidates (default: all conv/linear layers)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_select_layers)

    g = sub.add_parser("ensemble-eval", help="evaluate an ensemble of checkpoints")
    g.add_argument("--manifest", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--subgroup")
    g.add_argument("--out")
    g.set_defaults(func=cmd_ensemble_eval)

    g = sub.add_parser("evaluate", help="evaluate one checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--subgroup", help="attr=value row filter, e.g. sex=F")
    g.add_argument("--out")
    g.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("grad-check", help="finite-difference gradient check of a model variant")
    g.add_argument("--variant", default="all")
    g.add_argument("--task", choices=["regression", "classification", "both"], default="both")
    g.add_argument("--max-entries", type=int, default=20, help="entries probed per parameter tensor")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_grad_check)

    g = sub.add_parser("report", help="aggregate runs into tables, p-values and SVG charts")
    g.add_argument("--runs", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--no-charts", action="store_true")
    g.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            code = args.func(args)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"hyperfusion: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (T.NumericalError, T.NonDifferentiableError, FloatingPointError) as exc:
        print(f"hyperfusion: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"hyperfusion: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
