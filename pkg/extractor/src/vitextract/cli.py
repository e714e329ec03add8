"""CLI: ``vitextract extract`` (pass 1) and ``vitextract extract-crops``
(pass 2, driven by the clustering engine's crop manifest)."""
from __future__ import annotations

import argparse
import logging
import sys

from .extract import (
    ExtractorConfig, extract_crop_tokens, extract_image_features, gather_images,
)
from .vit import MODEL_SPECS

log = logging.getLogger("vitextract")


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="dinov2_vits14", choices=sorted(MODEL_SPECS))
    p.add_argument("--checkpoint", help="local path to an official state dict")
    p.add_argument("--random-init", action="store_true",
                   help="seeded random weights (testing only)")
    p.add_argument("--head-averaged", action="store_true",
                   help="average attention features over heads instead of "
                        "concatenating them")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--device", default="cpu")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitextract")
    sub = parser.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("extract", help="per-image feature grids + CLS tokens")
    _model_args(ex)
    ex.add_argument("--features", default="key",
                    help="comma list from query,key,value,patch")
    ex.add_argument("--images", help="directory of images (ids from filenames)")
    ex.add_argument("--input-list",
                    help="JSONL with image_id/image_path/gt_path per line")
    ex.add_argument("--out", required=True)

    cr = sub.add_parser("extract-crops", help="CLS token per crop-manifest row")
    _model_args(cr)
    cr.add_argument("--manifest", required=True, help="dataset manifest")
    cr.add_argument("--crop-manifest", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            cfg = ExtractorConfig(
                model=args.model,
                feature_kinds=tuple(k.strip() for k in args.features.split(",") if k.strip()),
                checkpoint=args.checkpoint,
                random_init=args.random_init,
                head_averaged=args.head_averaged,
                seed=args.seed,
                device=args.device,
                out_dir=args.out,
            )
            records = gather_images(args.images, args.input_list)
            extract_image_features(cfg, records)
        else:
            cfg = ExtractorConfig(
                model=args.model,
                checkpoint=args.checkpoint,
                random_init=args.random_init,
                head_averaged=args.head_averaged,
                seed=args.seed,
                device=args.device,
            )
            extract_crop_tokens(cfg, args.manifest, args.crop_manifest)
        return 0
    except Exception as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
