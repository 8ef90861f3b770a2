#!/usr/bin/env python3
"""Render a sweep CSV as the two standard comparison plots.

Usage: plot_sweep.py SWEEP_CSV [OUT_DIR]

Writes loss_vs_rate.png (final eval loss against pruning rate, one line per
method/rank) and loss_vs_rank.png (against rank, one line per method at the
median rate), aggregating repeats by their mean.
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            if row["status"] != "ok":
                continue
            rows.append(
                dict(
                    method=row["method"],
                    rank=int(row["rank"]),
                    rate=float(row["pruning_rate"]),
                    loss=float(row["final_eval_loss"]),
                )
            )
    return rows


def mean(values):
    return sum(values) / len(values)


def main():
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    rows = load(sys.argv[1])
    out_dir = Path(sys.argv[2] if len(sys.argv) > 2 else ".")
    out_dir.mkdir(parents=True, exist_ok=True)

    by_cell = defaultdict(list)
    for r in rows:
        by_cell[(r["method"], r["rank"], r["rate"])].append(r["loss"])
    cells = {k: mean(v) for k, v in by_cell.items()}
    methods = sorted({m for m, _, _ in cells})
    ranks = sorted({r for _, r, _ in cells})
    rates = sorted({p for _, _, p in cells})

    fig, ax = plt.subplots(figsize=(6, 4))
    for method in methods:
        for rank in ranks:
            xs = [p for p in rates if (method, rank, p) in cells]
            ys = [cells[(method, rank, p)] for p in xs]
            style = "-o" if method == "droplora" else "--s"
            ax.plot(xs, ys, style, label=f"{method} r={rank}")
    ax.set_xlabel("pruning rate")
    ax.set_ylabel("final eval loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "loss_vs_rate.png", dpi=150)

    mid_rate = rates[len(rates) // 2]
    fig2, ax2 = plt.subplots(figsize=(6, 4))
    for method in methods:
        xs = [r for r in ranks if (method, r, mid_rate) in cells]
        ys = [cells[(method, r, mid_rate)] for r in xs]
        ax2.plot(xs, ys, "-o" if method == "droplora" else "--s", label=method)
    ax2.set_xlabel("rank")
    ax2.set_ylabel(f"final eval loss (rate {mid_rate:g})")
    ax2.set_xscale("log", base=2)
    ax2.set_yscale("log")
    ax2.legend()
    fig2.tight_layout()
    fig2.savefig(out_dir / "loss_vs_rank.png", dpi=150)
    print(f"wrote {out_dir / 'loss_vs_rate.png'} and {out_dir / 'loss_vs_rank.png'}")


if __name__ == "__main__":
    main()
