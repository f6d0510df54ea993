"""Aggregate metrics CSVs from repeated runs and render summary figures.

Input files must share the exact column schema.  Rows are aligned on the
iteration column (intersection across files), then each numeric column is
reduced to mean/min/max.  Figures show per-run traces thin and the mean
bold, written next to the aggregate CSV.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .exceptions import ConfigError
from .metrics import read_metrics

# columns that identify a row rather than measure anything
_KEY = "iteration"
_SKIP = ("iteration", "expert")


def aggregate(paths, out_dir):
    """Combine per-run metrics into aggregate.csv plus figures.

    Returns the aggregate rows as a list of dicts (iteration plus
    mean/min/max per metric column).
    """
    if not paths:
        raise ConfigError("no metrics files given")
    runs = []
    fields = None
    for p in paths:
        _, f, rows = read_metrics(p)
        if fields is None:
            fields = f
        elif f != fields:
            raise ConfigError(
                f"metrics schema mismatch: {p} has columns {f}, "
                f"expected {fields}"
            )
        if not rows:
            raise ConfigError(f"metrics file {p} has no data rows")
        runs.append({r[_KEY]: r for r in rows})

    common = set(runs[0])
    for r in runs[1:]:
        common &= set(r)
    if not common:
        raise ConfigError("metrics files share no iterations")
    iters = sorted(common)

    metric_cols = [c for c in fields if c not in _SKIP]
    agg_fields = [_KEY]
    for c in metric_cols:
        agg_fields += [f"{c}_mean", f"{c}_min", f"{c}_max"]

    out_rows = []
    for it in iters:
        row = {_KEY: it}
        for c in metric_cols:
            vals = [run[it][c] for run in runs]
            row[f"{c}_mean"] = sum(vals) / len(vals)
            row[f"{c}_min"] = min(vals)
            row[f"{c}_max"] = max(vals)
        out_rows.append(row)

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "aggregate.csv")
    with open(csv_path, "w") as f:
        f.write(",".join(agg_fields) + "\n")
        for row in out_rows:
            cells = [str(int(row[_KEY]))]
            for c in agg_fields[1:]:
                cells.append(repr(float(row[c])))
            f.write(",".join(cells) + "\n")

    for col, fname in (("match_loss", "match_loss.png"), ("mmd", "mmd.png")):
        if col not in fields:
            continue
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for i, run in enumerate(runs):
            ys = [run[it][col] for it in iters]
            ax.plot(iters, ys, lw=0.7, alpha=0.5,
                    label=f"run {i}" if len(runs) <= 8 else None)
        mean_ys = [row[f"{col}_mean"] for row in out_rows]
        ax.plot(iters, mean_ys, lw=2.2, color="black", label="mean")
        ax.set_xlabel("iteration")
        ax.set_ylabel(col)
        ax.set_title(f"{col} over {len(runs)} run(s)")
        if len(runs) <= 8:
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, fname), dpi=120)
        plt.close(fig)

    return out_rows
