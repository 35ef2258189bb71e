"""Command-line front end.

Five subcommands: ``train``, ``fuse``, ``eval``, ``ablate``, ``gradcheck``.
Every subcommand accepts ``--config PATH``, repeatable ``--set
section.key=value`` overrides, ``--seed N`` (reseeds sampling and weight
init together), and ``--out DIR``. Each run writes the fully resolved
configuration to ``<out>/effective.cfg`` before doing anything else.

Exit codes: 0 success, 1 a check or training run failed, 2 unusable input
(bad flags, config keys, files, or image geometry). ``ATFUSE_THREADS`` caps
the worker pool used when scoring image sets.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from .ablate import FAMILIES, run_family
from .autograd import FinitenessError
from .checkpoint import CheckpointError, load_checkpoint
from .config import (ConfigError, apply_overrides, build_train_config,
                     effective_text, load_config_file, with_seed)
from .figures import save_loss_curves, save_metric_bars
from .gradcheck import grad_check
from .images import (GrayImage, ImageFormatError, ImagePair, load_corpus,
                     load_gray, save_gray)
from .metrics import MetricReport, evaluate_pairs, mean_report, metric_report
from .model import AtfuseModel, fuse_images
from .trainer import TrainAbort, train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atfuse",
                                     description="infrared/visible image fusion")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat config file (section.key = value)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--seed", type=int, help="reseed weight init and sampling")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train on an ir/vi corpus")
    p.add_argument("--corpus", required=True, help="directory with ir/ and vi/ subdirs")

    p = sub.add_parser("fuse", parents=[common], help="fuse one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--vi", required=True)

    p = sub.add_parser("eval", parents=[common], help="score fused images against sources")
    p.add_argument("--fused", required=True, help="directory of fused images")
    p.add_argument("--ir", required=True, help="directory of infrared sources")
    p.add_argument("--vi", required=True, help="directory of visible sources")

    p = sub.add_parser("ablate", parents=[common], help="train and compare variants")
    p.add_argument("--corpus", required=True)
    p.add_argument("--variant", required=True, choices=FAMILIES + ("all",))

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of the backward pass")
    p.add_argument("--scope", default="all", choices=("all", "model", "losses"))
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _metric_line(name: str, report: MetricReport) -> str:
    parts = " ".join("%s=%.6g" % (k, getattr(report, k)) for k in MetricReport.FIELDS)
    return "%s %s" % (name, parts)


def _write_metric_csv(path: Path, rows, mean_row: MetricReport | None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("name",) + MetricReport.FIELDS)
        for name, report in rows:
            writer.writerow([name] + report.as_row())
        if mean_row is not None:
            writer.writerow(["mean"] + mean_row.as_row())


def _cmd_train(args, cfg, out: Path) -> int:
    pairs = load_corpus(args.corpus)
    model = AtfuseModel(cfg.model)
    records = train(model, pairs, cfg, log_path=out / "train_log.csv", checkpoint_dir=out)
    save_loss_curves(records, out / "loss_curve.png")
    print("trained %d epochs, %d steps: total %.6f -> %.6f"
          % (cfg.epochs, len(records), records[0].total, records[-1].total))
    return 0


def _cmd_fuse(args, cfg, out: Path) -> int:
    model = load_checkpoint(args.checkpoint)
    pair = ImagePair(load_gray(args.ir), load_gray(args.vi), name="fused")
    fused = fuse_images(model, pair)
    save_gray(fused, out / "fused.pgm")
    print(_metric_line("fused", metric_report(fused, pair.ir, pair.vi)))
    return 0


def _load_image_dir(path: str) -> dict[str, Path]:
    root = Path(path)
    if not root.is_dir():
        raise ImageFormatError("image directory not found: %s" % root)
    return {p.stem: p for p in sorted(root.iterdir())
            if p.suffix.lower() in (".pgm", ".png")}


def _cmd_eval(args, cfg, out: Path) -> int:
    fused_files = _load_image_dir(args.fused)
    ir_files = _load_image_dir(args.ir)
    vi_files = _load_image_dir(args.vi)
    entries: list[tuple[str, GrayImage, GrayImage, GrayImage]] = []
    for stem in sorted(fused_files):
        if stem not in ir_files or stem not in vi_files:
            raise ImageFormatError("no source pair for fused image %r" % stem)
        entries.append((stem, load_gray(fused_files[stem]),
                        load_gray(ir_files[stem]), load_gray(vi_files[stem])))
    rows = evaluate_pairs(entries)
    mean_row = mean_report([r for _, r in rows]) if rows else None
    _write_metric_csv(out / "metrics.csv", rows, mean_row)
    if rows:
        save_metric_bars(rows, out / "metrics.png")
        print(_metric_line("mean", mean_row))
    else:
        print("no fused images to score; wrote header-only CSV")
    return 0


def _cmd_ablate(args, cfg, out: Path) -> int:
    pairs = load_corpus(args.corpus)
    families = FAMILIES if args.variant == "all" else (args.variant,)
    for family in families:
        rows = run_family(family, cfg, pairs, out)
        for label, report in rows:
            print(_metric_line("%s/%s" % (family, label), report))
    return 0


def _cmd_gradcheck(args, cfg, out: Path) -> int:
    reports = grad_check(scope=args.scope, tolerance=args.tolerance)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("group", "max_rel_err", "checked", "skipped_kink", "passed"))
        for r in reports:
            writer.writerow([r.name, "%.6e" % r.max_rel_err, r.n_checked,
                             r.n_skipped_kink, str(r.passed).lower()])
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    if failed:
        print("gradcheck: %d of %d groups failed" % (len(failed), len(reports)))
        return 1
    print("gradcheck: all %d groups within %.1e" % (len(reports), args.tolerance))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "fuse": _cmd_fuse,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        values = load_config_file(args.config) if args.config else {}
        values = apply_overrides(values, args.set)
        cfg = build_train_config(values)
        if args.seed is not None:
            cfg = with_seed(cfg, args.seed)
        if args.command == "fuse":
            # The checkpoint's architecture is authoritative for fusion.
            cfg = replace(cfg, model=load_checkpoint(args.checkpoint).config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective.cfg").write_text(effective_text(cfg), encoding="utf-8")
        return _COMMANDS[args.command](args, cfg, out)
    except (TrainAbort, FinitenessError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except (ConfigError, ImageFormatError, CheckpointError, ValueError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
