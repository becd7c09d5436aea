"""Aggregate run results per variant: mean and std tables, pairwise Mann-Whitney p-values, SVG bars."""

from __future__ import annotations

import os
from itertools import combinations

import numpy as np

from .fileio import read_json, write_csv, write_json
from .metrics import mann_whitney_u


def aggregate(runs, metrics):
    """{variant: {metric: {"mean", "std", "n", "values"}}} in first-seen variant order."""
    out = {}
    for r in runs:
        out.setdefault(r["variant"], {m: [] for m in metrics})
        for m in metrics:
            if r.get(m) is not None:
                out[r["variant"]][m].append(float(r[m]))
    summary = {}
    for variant, vals in out.items():
        summary[variant] = {
            m: {"mean": float(np.mean(v)) if v else None, "std": float(np.std(v)) if v else None,
                "n": len(v), "values": v}
            for m, v in vals.items()
        }
    return summary


def pairwise_pvalues(summary, metric):
    rows = []
    for a, b in combinations(list(summary), 2):
        va, vb = summary[a][metric]["values"], summary[b][metric]["values"]
        if va and vb:
            rows.append({"a": a, "b": b, "metric": metric, "p": mann_whitney_u(va, vb)})
    return rows


def bar_chart_svg(path, summary, metric):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "hyperfusion"
    variants = [v for v in summary if summary[v][metric]["mean"] is not None]
    means = [summary[v][metric]["mean"] for v in variants]
    stds = [summary[v][metric]["std"] for v in variants]
    fig, ax = plt.subplots(figsize=(1.2 * len(variants) + 2, 3.2))
    ax.bar(range(len(variants)), means, yerr=stds, capsize=4, color="#4c72b0")
    ax.set_xticks(range(len(variants)), variants, rotation=30, ha="right")
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} (mean ± std over runs)")
    fig.tight_layout()
    tmp = path + ".tmp"
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)


def write_report(runs_dir, out_dir, charts=True):
    data = read_json(os.path.join(runs_dir, "runs.json"))
    metrics = data["metrics"]
    summary = aggregate(data["runs"], metrics)
    os.makedirs(out_dir, exist_ok=True)
    header = ["variant", "metric", "mean", "std", "n"]
    rows = [[v, m, s[m]["mean"], s[m]["std"], s[m]["n"]] for v, s in summary.items() for m in metrics]
    write_csv(os.path.join(out_dir, "summary.csv"), header, rows)
    pvals = [p for m in metrics for p in pairwise_pvalues(summary, m)]
    write_csv(os.path.join(out_dir, "pvalues.csv"), ["a", "b", "metric", "p"],
              [[p["a"], p["b"], p["metric"], p["p"]] for p in pvals])
    write_json(os.path.join(out_dir, "summary.json"), {"task": data["task"], "summary": summary, "pvalues": pvals})
    if charts:
        for m in metrics:
            bar_chart_svg(os.path.join(out_dir, f"{m}.svg"), summary, m)
    return summary, pvals
