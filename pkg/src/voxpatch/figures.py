"""Benchmark report figures rendered to files next to the CSV output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _series(report, status):
    """(ratios, mean CD, mean IoU) over rows with the given status."""
    groups: dict = {}
    for r in report.rows:
        if r.status != status:
            continue
        groups.setdefault(round(r.crop_ratio, 4), []).append(r)
    ratios = sorted(groups)
    cd = [float(np.mean([r.cd_l2_x1000 for r in groups[x]])) for x in ratios]
    iou = [float(np.mean([r.iou for r in groups[x]])) for x in ratios]
    return ratios, cd, iou


def render_report_figures(report, out_dir, prefix: str = "eval") -> list:
    """Write CD-vs-ratio and IoU-vs-ratio figures; returns the file paths."""
    import os

    ratios, cd, iou = _series(report, "ok")
    ratios_b, cd_b, iou_b = _series(report, "coarse_only")
    paths = []

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ratios, cd, "o-", label="full pipeline")
    if ratios_b:
        ax.plot(ratios_b, cd_b, "s--", label="coarse only")
    ax.set_xlabel("crop ratio (fraction of occupied volume)")
    ax.set_ylabel("Chamfer-L2 x1000 (unit cube)")
    ax.set_title("Completion error vs crop ratio")
    ax.legend()
    fig.tight_layout()
    p = os.path.join(out_dir, f"{prefix}_cd_vs_ratio.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ratios, iou, "o-", label="full pipeline")
    if ratios_b:
        ax.plot(ratios_b, iou_b, "s--", label="coarse only")
    ax.set_xlabel("crop ratio (fraction of occupied volume)")
    ax.set_ylabel("IoU vs ground truth")
    ax.set_title("Completion IoU vs crop ratio")
    ax.legend()
    fig.tight_layout()
    p = os.path.join(out_dir, f"{prefix}_iou_vs_ratio.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths
