"""Command line entry point.

Subcommands: segment, label, eval, pca.  Besides the named flags, any
config field can be overridden with a dotted flag, e.g.
``--crf.iterations 5`` or ``--refine.crf_enabled false``.

Exit codes: 0 success, 2 label is awaiting crop tokens, 1 failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import RunConfig, load_config, set_dotted
from .pipeline import PipelineError, run_eval, run_label, run_pca, run_segment

log = logging.getLogger("clusterseg")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--manifest", help="dataset manifest (line-delimited JSON)")
    parser.add_argument("--out", help="run output directory")
    parser.add_argument("--seed", type=int, help="root RNG seed (required)")
    parser.add_argument("--feature", choices=("query", "key", "value"),
                        help="attention feature kind to cluster")
    parser.add_argument("--clusters", help="D,C,I cluster counts, e.g. 4,3,2")
    parser.add_argument("--batch-size", type=int, dest="batch_size",
                        help="dataset-level batch size")
    parser.add_argument("--num-classes", type=int, dest="num_classes",
                        help="foreground class count (20 VOC, 80 COCO)")
    parser.add_argument("--num-superclasses", type=int, dest="num_superclasses",
                        help="superclass count (4 VOC, 11 COCO)")
    parser.add_argument("--levels", help="subset of dataset,category,image")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusterseg",
        description="network-free unsupervised semantic segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("segment", "cluster features and write binary + refined masks"),
        ("label", "extract regions and assign classes to them"),
        ("eval", "Hungarian-matched mIoU / pixel accuracy report"),
        ("pca", "2-D feature projection table and scatter plot"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p)
    return parser


def _build_config(args: argparse.Namespace, extra: list[str]) -> RunConfig:
    cfg = load_config(args.config)
    for name in ("manifest", "out", "seed", "feature", "batch_size",
                 "num_classes", "num_superclasses"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.clusters:
        parts = [int(p) for p in args.clusters.split(",")]
        if len(parts) != 3:
            raise ValueError("--clusters expects three counts: D,C,I")
        cfg.clusters = tuple(parts)
    if args.levels:
        cfg.levels = tuple(p.strip() for p in args.levels.split(",") if p.strip())

    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ValueError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            path, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ValueError(f"missing value for {tok!r}")
            path, raw = tok[2:], extra[i + 1]
            i += 2
        set_dotted(cfg, path, raw)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = _build_config(args, extra)
    except ValueError as exc:
        log.error("config: %s", exc)
        return 1
    try:
        if args.command == "segment":
            run_segment(cfg)
        elif args.command == "label":
            status, _ = run_label(cfg)
            return status
        elif args.command == "eval":
            run_eval(cfg)
        elif args.command == "pca":
            run_pca(cfg)
        return 0
    except PipelineError as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # unexpected: still exit nonzero, keep the trace
        log.exception("unexpected failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
