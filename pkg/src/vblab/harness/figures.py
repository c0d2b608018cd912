"""Summaries and figures rendered from a records file.

The report path turns the long-format records into a per-size summary
table plus two diagnostic figures: log-log RMSE against size with fitted
slopes, and the spread of raw errors by size. Files land next to the
delimited output.
"""

from __future__ import annotations

import csv
import json
import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def load_records(path) -> list:
    """Read a records csv back into typed tuples."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append((int(row["n"]), int(row["rep"]), row["estimator"],
                         row["coord"], float(row["value"]),
                         float(row["error"]), float(row["seconds"])))
    return rows


def summarize_records(records) -> list:
    """Per (estimator, coord, n): rmse, median error, mean seconds."""
    groups = {}
    for n, rep, est, coord, value, error, seconds in records:
        groups.setdefault((est, coord, n), []).append((error, seconds))
    out = []
    for (est, coord, n), pairs in sorted(groups.items()):
        errs = np.array([p[0] for p in pairs])
        secs = np.array([p[1] for p in pairs])
        out.append({
            "estimator": est,
            "coord": coord,
            "n": n,
            "replications": len(pairs),
            "rmse": float(np.sqrt(np.mean(errs**2))),
            "median_error": float(np.median(errs)),
            "mean_seconds": float(secs.mean()),
        })
    return out


def _slope(sizes, values):
    lx = np.log(np.asarray(sizes, dtype=float))
    ly = np.log(np.asarray(values, dtype=float))
    xbar = lx.mean()
    sxx = float(((lx - xbar) ** 2).sum())
    if sxx == 0.0:
        return float("nan")
    return float(((lx - xbar) * (ly - ly.mean())).sum() / sxx)


def _grouped(summary):
    by_pair = {}
    for row in summary:
        by_pair.setdefault((row["estimator"], row["coord"]), []).append(row)
    for rows in by_pair.values():
        rows.sort(key=lambda r: r["n"])
    return by_pair


def render_rmse_figure(summary, path) -> None:
    by_pair = _grouped(summary)
    fig, ax = plt.subplots(figsize=(7.0, 5.0))
    for (est, coord), rows in sorted(by_pair.items()):
        sizes = [r["n"] for r in rows]
        rmse = [r["rmse"] for r in rows]
        if len(sizes) < 2 or min(rmse) <= 0.0:
            label = f"{est}:{coord}"
        else:
            label = f"{est}:{coord} (slope {_slope(sizes, rmse):.2f})"
        ax.loglog(sizes, rmse, marker="o", label=label)
    ax.set_xlabel("size")
    ax.set_ylabel("rmse")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_error_figure(records, path) -> None:
    by_pair = {}
    for n, rep, est, coord, value, error, seconds in records:
        by_pair.setdefault((est, coord), {}).setdefault(n, []).append(error)
    pairs = sorted(by_pair)
    cols = min(3, len(pairs))
    rows_count = math.ceil(len(pairs) / cols)
    fig, axes = plt.subplots(rows_count, cols,
                             figsize=(4.0 * cols, 3.0 * rows_count),
                             squeeze=False)
    for idx, key in enumerate(pairs):
        ax = axes[idx // cols][idx % cols]
        sizes = sorted(by_pair[key])
        ax.boxplot([by_pair[key][n] for n in sizes],
                   tick_labels=[str(n) for n in sizes])
        ax.axhline(0.0, color="gray", lw=0.8)
        ax.set_title(f"{key[0]}:{key[1]}", fontsize=9)
    for idx in range(len(pairs), rows_count * cols):
        axes[idx // cols][idx % cols].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_summary(summary, path, fmt="csv") -> None:
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "coord", "n", "replications", "rmse",
                    "median_error", "mean_seconds"])
        for row in summary:
            w.writerow([row["estimator"], row["coord"], row["n"],
                        row["replications"], repr(row["rmse"]),
                        repr(row["median_error"]),
                        f"{row['mean_seconds']:.3f}"])


def render_report(records_path, out_dir=None, fmt="csv") -> list:
    """Summary table plus figures from a records file; returns paths."""
    out_dir = out_dir or os.path.dirname(os.path.abspath(records_path))
    os.makedirs(out_dir, exist_ok=True)
    records = load_records(records_path)
    if not records:
        raise ValueError(f"no records in {records_path}")
    summary = summarize_records(records)
    paths = []
    summary_path = os.path.join(out_dir, f"summary.{fmt}")
    write_summary(summary, summary_path, fmt=fmt)
    paths.append(summary_path)
    rmse_path = os.path.join(out_dir, "rmse_by_size.png")
    render_rmse_figure(summary, rmse_path)
    paths.append(rmse_path)
    err_path = os.path.join(out_dir, "error_spread.png")
    render_error_figure(records, err_path)
    paths.append(err_path)
    return paths
