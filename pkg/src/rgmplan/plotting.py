"""Matplotlib figures written to files (Agg backend, no display needed)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench import BenchRecord, Planner, censored  # noqa: E402
from .trainer import LossReport  # noqa: E402

_PANELS = (("initial_cost", "initial path length"), ("initial_iters", "iterations to initial path"),
           ("optimal_cost", "final path length"), ("optimal_iters", "iterations to near-optimal"))


def bench_boxplots(records: Sequence[BenchRecord], path: str | Path, iters_fill: float | None = None) -> None:
    """Box plots of the four bench quantities, one pair of boxes per map."""
    maps = sorted({r.map_id for r in records})
    fill = iters_fill if iters_fill is not None else 1 + max(
        (v for r in records for v in (r.initial_iters, r.optimal_iters) if v is not None), default=0)
    fig, axes = plt.subplots(1, 4, figsize=(4 * 3.2, 3.4))
    for ax, (q, title) in zip(axes, _PANELS):
        data, labels = [], []
        for mid in maps:
            for planner in (Planner.RRT_STAR, Planner.HRRT_STAR):
                vals = [getattr(r, q) for r in records if r.map_id == mid and r.planner == planner]
                arr = censored(vals, fill) if q.endswith("iters") else np.array([v for v in vals if v is not None])
                data.append(arr)
                labels.append(f"{mid}\n{planner.value}")
        bp = ax.boxplot(data, patch_artist=True, widths=0.6)
        for k, box in enumerate(bp["boxes"]):
            box.set_facecolor("#cfcfcf" if k % 2 == 0 else "#f2c14e")
        ax.set_xticks(range(1, len(labels) + 1), labels, rotation=90, fontsize=6)
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curves(reports: Sequence[LossReport], path: str | Path) -> None:
    steps = [r.step for r in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(steps, [r.l_g for r in reports], label="L(G)")
    ax1.plot(steps, [r.l_d1 for r in reports], label="L(D1)")
    ax1.plot(steps, [r.l_d2 for r in reports], label="L(D2)")
    ax1.set_xlabel("step")
    ax1.legend(fontsize=8)
    ax2.plot(steps, [r.mean_real_score for r in reports], label="real")
    ax2.plot(steps, [r.mean_fake_score for r in reports], label="fake")
    ax2.set_xlabel("step")
    ax2.set_ylabel("mean D score")
    ax2.set_ylim(0, 1)
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
