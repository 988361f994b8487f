"""Report rendering: detection table, per-condition histogram CSVs, figures.

Takes an experiment report and writes, into one output directory:

* ``table.csv``: one row per condition (name, n, id_count, ood_count);
* ``hist_<condition>.csv``: bin_lo, bin_hi, count rows per condition;
* ``hist_<condition>.svg``: a bar chart of the p-value histogram (optional).

Figures go through matplotlib's Agg backend with a pinned SVG hash salt and
no embedded date, so identical reports render byte-identical files.
"""

from __future__ import annotations

import io
import os
import re

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .experiment import ConditionResult, ExperimentReport
from .traces import _atomic_write_bytes

plt.rcParams["svg.hashsalt"] = "actmon"


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def write_table_csv(report: ExperimentReport, path: str) -> None:
    lines = ["condition,n,id_count,ood_count"]
    lines += [f"{c.name},{c.n},{c.id_count},{c.ood_count}" for c in report.conditions]
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_histogram_csv(cond: ConditionResult, path: str) -> None:
    lines = ["bin_lo,bin_hi,count"]
    edges = cond.bin_edges
    lines += [
        f"{edges[i]!r},{edges[i + 1]!r},{cond.bin_counts[i]}"
        for i in range(len(cond.bin_counts))
    ]
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def render_histogram_figure(cond: ConditionResult, path: str) -> None:
    """Bar chart of one condition's p-value histogram, saved as a figure."""
    edges = cond.bin_edges
    centers = [(edges[i] + edges[i + 1]) / 2.0 for i in range(len(cond.bin_counts))]
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    ax.bar(centers, cond.bin_counts, width=width * 0.92, color="#3b6ea5", edgecolor="none")
    ax.set_xlabel("p-value")
    ax.set_ylabel("number of samples")
    ax.set_title(f"{cond.name} (n={cond.n}, OOD={cond.ood_count})")
    ax.set_xlim(0.0, 1.0)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    _atomic_write_bytes(path, buf.getvalue())


def render_report(report: ExperimentReport, out_dir: str, figures: bool = True) -> list[str]:
    """Write the table, the histogram CSVs, and optionally the figures.

    Returns the list of written paths (table first, then per condition).
    """
    os.makedirs(out_dir, exist_ok=True)
    written = [os.path.join(out_dir, "table.csv")]
    write_table_csv(report, written[0])
    for cond in report.conditions:
        csv_path = os.path.join(out_dir, f"hist_{_slug(cond.name)}.csv")
        write_histogram_csv(cond, csv_path)
        written.append(csv_path)
        if figures:
            svg_path = os.path.join(out_dir, f"hist_{_slug(cond.name)}.svg")
            render_histogram_figure(cond, svg_path)
            written.append(svg_path)
    return written
