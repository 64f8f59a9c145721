"""Figures for evaluation reports, rendered to image files."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .detection import FN, TP, EvaluationReport  # noqa: E402

GROUP_COLORS = {TP: "#4c72b0", FN: "#dd8452"}


def _label(report: EvaluationReport) -> str:
    rate = "" if report.rate is None else f"\nR={report.rate:g}"
    return f"{report.method}{rate}"


def _group_values(report: EvaluationReport, group: str):
    return [r["ssim"] for r in report.slices if r["outcome"] == group and r.get("ssim") is not None]


def ssim_group_figure(reports: Sequence[EvaluationReport], path, title: str = "SSIM of TP vs FN slices"):
    """Bar chart of mean SSIM over TP and FN slices, one bar pair per report.

    Error bars show one standard deviation; individual slice values are
    overlaid as points. Empty groups are left blank.
    """
    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(reports) + 1.5), 3.6))
    x = np.arange(len(reports))
    width = 0.36
    labelled = set()
    for k, group in enumerate((TP, FN)):
        offs = x + (k - 0.5) * width
        for xi, rep in zip(offs, reports):
            vals = _group_values(rep, group)
            if not vals:
                continue
            ax.bar(xi, np.mean(vals), width, yerr=np.std(vals) if len(vals) > 1 else None,
                   color=GROUP_COLORS[group], capsize=3, alpha=0.85,
                   label=None if group in labelled else group)
            labelled.add(group)
            ax.scatter(np.full(len(vals), xi), vals, s=8, color="k", zorder=3)
    ax.set_xticks(x)
    ax.set_xticklabels([_label(r) for r in reports])
    ax.set_ylabel("SSIM")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    if labelled:
        ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def sensitivity_figure(reports: Sequence[EvaluationReport], path):
    """Detection sensitivity against acceleration rate, one line per method."""
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    by_method = {}
    for rep in reports:
        if rep.rate is not None and rep.sensitivity is not None:
            by_method.setdefault(rep.method, []).append((rep.rate, rep.sensitivity))
    for method, pts in sorted(by_method.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xlabel("acceleration rate R")
    ax.set_ylabel("sensitivity TP/(TP+FN)")
    ax.set_ylim(-0.05, 1.05)
    if by_method:
        ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
