"""``sparseseg`` command line: bench-dataflows, train, eval, augment-preview."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from sparseseg.bench import COMMANDS, emit_report
from sparseseg.config import load_config
from sparseseg.errors import SparseSegError
from sparseseg.tta import TTAConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "bench-dataflows": "verify and time the sparse convolution dataflows",
        "train": "train the tiny segmentor and write a checkpoint",
        "eval": "evaluate a checkpoint, optionally with test-time augmentation",
        "augment-preview": "write a mixed scan pair for inspection",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--threads", type=int, help="1 = deterministic single-threaded mode")
        p.add_argument("--out", help="output directory for reports, checkpoints and scans")
        p.add_argument("--format", choices=("json", "csv"), help="report format")
        if name == "eval":
            p.add_argument("--tta", type=int, choices=range(5), metavar="{0..4}",
                           help="enable flip, rotate, scale, translate cumulatively")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {"seed": args.seed, "threads": args.threads, "out_dir": args.out, "format": args.format}
        cfg = load_config(args.config, **overrides)
        if getattr(args, "tta", None) is not None:
            flags = TTAConfig.progressive(args.tta)
            tta = replace(cfg.eval.tta, flip=flags.flip, rotate=flags.rotate,
                          scale=flags.scale, translate=flags.translate)
            cfg = replace(cfg, eval=replace(cfg.eval, tta=tta))
        report = COMMANDS[args.command](cfg)
    except SparseSegError as exc:
        print(f"sparseseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    path = Path(cfg.out_dir) / f"{args.command}.{cfg.format}"
    text = emit_report(report, cfg.format, path)
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
