"""Ablation harness: train variant grids under one seed and compare.

Each family perturbs exactly one knob of the base configuration:

* ``no_diim``     - drop the discrepancy stage (visible tokens seed the chain)
* ``no_aciim``    - drop the injection stages (blocks return the discrepancy)
* ``alpha_sweep`` - salient-fraction sweep 0, 20, 50, 80, 100
* ``gamma_sweep`` - texture-weight sweep 0.5, 0.75, 1.0
* ``block_count`` - fusion-block count sweep 1, 2, 3

Every variant trains from scratch with the shared seed, fuses the corpus in
eval mode, and reports corpus-mean metrics; the comparison CSV carries one
row per variant plus the baseline.
"""

from __future__ import annotations

import csv
import os
from dataclasses import replace
from pathlib import Path

from .figures import save_ablation_chart
from .images import ImagePair
from .metrics import MetricReport, evaluate_pairs, mean_report
from .model import AtfuseModel, fuse_images
from .trainer import TrainConfig, train

FAMILIES = ("no_diim", "no_aciim", "alpha_sweep", "gamma_sweep", "block_count")

ALPHA_GRID = (0.0, 20.0, 50.0, 80.0, 100.0)
GAMMA_GRID = (0.5, 0.75, 1.0)
BLOCK_GRID = (1, 2, 3)


def family_variants(family: str, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """(label, config) per variant; the baseline always leads."""
    baseline = ("full", base)
    if family == "no_diim":
        return [baseline, ("no_diim", replace(base, model=replace(base.model, use_diim=False)))]
    if family == "no_aciim":
        return [baseline, ("no_aciim", replace(base, model=replace(base.model, use_aciim=False)))]
    if family == "alpha_sweep":
        return [("alpha_%g" % a, replace(base, loss=replace(base.loss, alpha=a)))
                for a in ALPHA_GRID]
    if family == "gamma_sweep":
        return [("gamma_%g" % g, replace(base, loss=replace(base.loss, gamma=g)))
                for g in GAMMA_GRID]
    if family == "block_count":
        return [("blocks_%d" % n, replace(base, model=replace(base.model, n_fusion_blocks=n)))
                for n in BLOCK_GRID]
    raise ValueError("unknown ablation family %r (families: %s)" % (family, ", ".join(FAMILIES)))


def run_variant(label: str, cfg: TrainConfig, pairs: list[ImagePair],
                out_dir: Path) -> MetricReport:
    """Train one variant, checkpoint it, and score the fused corpus."""
    variant_dir = out_dir / "variants" / label
    variant_dir.mkdir(parents=True, exist_ok=True)
    model = AtfuseModel(cfg.model)
    train(model, pairs, cfg, log_path=variant_dir / "train_log.csv",
          checkpoint_dir=variant_dir)
    entries = [(pair.name, fuse_images(model, pair), pair.ir, pair.vi)
               for pair in pairs]
    return mean_report([report for _, report in evaluate_pairs(entries)])


def run_family(family: str, base: TrainConfig, pairs: list[ImagePair],
               out_dir: str | os.PathLike) -> list[tuple[str, MetricReport]]:
    """Train the family, then write ablate_<family>.csv and its chart."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [(label, run_variant(label, cfg, pairs, out_dir))
            for label, cfg in family_variants(family, base)]
    csv_path = out_dir / ("ablate_%s.csv" % family)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("variant", "seed") + MetricReport.FIELDS)
        for label, report in rows:
            writer.writerow([label, base.seed] + report.as_row())
    save_ablation_chart(rows, out_dir / ("ablate_%s.png" % family))
    return rows
