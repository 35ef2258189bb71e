"""Figures rendered next to every delimited report.

All plots go straight to files through the Agg backend; nothing here opens
a window. Axes stay deliberately plain so the images diff well run to run.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import MetricReport


def save_loss_curves(records, path: str | os.PathLike) -> None:
    """Per-step objective terms over the whole run."""
    steps = range(len(records))
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, style in (("total", "-"), ("l_pixel", "--"), ("l_texture", ":")):
        ax.plot(steps, [getattr(r, key) for r in records], style, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    ax.set_title("training objective")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _metric_panels(labels: list[str], reports: list[MetricReport],
                   path: str | os.PathLike, title: str) -> None:
    names = MetricReport.FIELDS
    fig, axes = plt.subplots(1, len(names), figsize=(3 * len(names), 3.2))
    x = range(len(labels))
    for ax, name in zip(axes, names):
        ax.bar(x, [getattr(r, name) for r in reports], color="#4878a8")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
        ax.set_title(name)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_metric_bars(rows: list[tuple[str, MetricReport]], path: str | os.PathLike) -> None:
    """One panel per metric, one bar per evaluated image."""
    labels = [name for name, _ in rows]
    reports = [report for _, report in rows]
    _metric_panels(labels, reports, path, "fusion metrics per image")


def save_ablation_chart(rows: list[tuple[str, MetricReport]], path: str | os.PathLike) -> None:
    """One panel per metric, one bar per trained variant."""
    labels = [name for name, _ in rows]
    reports = [report for _, report in rows]
    _metric_panels(labels, reports, path, "ablation comparison")
