"""Training-curve rendering from metrics JSONL files."""

from __future__ import annotations

import os
import warnings

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import read_metrics

CURVE_PANELS = [
    ("mean_reward", "group reward"),
    ("heldout_reward", "held-out reward"),
    ("kl_mean", "KL penalty"),
    ("ar_grad_norm", "backbone grad norm"),
    ("head_grad_norm", "head grad norm"),
    ("objective", "objective"),
]


def _series(records: list[dict], key: str):
    xs = [r["iteration"] for r in records if key in r]
    ys = [r[key] for r in records if key in r]
    return xs, ys


def plot_metrics(metrics_path: str, out_dir: str | None = None,
                 stem: str = "curves") -> list[str]:
    """Render curve panels to SVG and dump the raw series to CSV.

    Malformed metric lines are skipped with a warning; partial files
    (e.g. from an interrupted run) still plot.
    """
    records, skipped = read_metrics(metrics_path)
    if skipped:
        warnings.warn(f"skipped {skipped} malformed metric line(s) in {metrics_path}")
    if not records:
        raise ValueError(f"no usable metric records in {metrics_path}")
    out_dir = out_dir or os.path.dirname(os.path.abspath(metrics_path))
    os.makedirs(out_dir, exist_ok=True)

    panels = [(key, label) for key, label in CURVE_PANELS
              if any(key in r for r in records)]
    ncols = 2
    nrows = (len(panels) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(9, 2.6 * nrows), squeeze=False)
    for ax in axes.flat:
        ax.set_visible(False)
    for ax, (key, label) in zip(axes.flat, panels):
        ax.set_visible(True)
        xs, ys = _series(records, key)
        ax.plot(xs, ys, linewidth=1.0)
        ax.set_title(label, fontsize=9)
        ax.set_xlabel("iteration", fontsize=8)
        ax.tick_params(labelsize=7)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    svg_path = os.path.join(out_dir, f"{stem}.svg")
    fig.savefig(svg_path)
    plt.close(fig)

    keys = sorted({k for r in records for k in r if k != "schema"})
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for r in records:
            fh.write(",".join("" if k not in r else repr(r[k]) for k in keys) + "\n")
    return [svg_path, csv_path]
