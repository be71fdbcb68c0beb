"""Standalone entry point for the feature exporter."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import LAYER_TAPS, ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featexport",
        description="Export frozen-backbone feature maps for an image folder.",
    )
    parser.add_argument("--image-dir", required=True)
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--layer", default="conv5_3", choices=sorted(LAYER_TAPS))
    parser.add_argument("--short-side", type=int, default=224)
    parser.add_argument("--category", default="")
    parser.add_argument("--weights", default="pretrained", choices=("pretrained", "random"),
                        help="'random' gives a seeded untrained backbone (offline use)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--sample-size", type=int, default=100_000,
                        help="vectors kept in features_sample.npy")
    parser.add_argument("--annotations",
                        help="manifest-style JSON whose landmarks/part_boxes are merged in")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        image_dir=args.image_dir,
        output_dir=args.out_dir,
        layer=args.layer,
        short_side=args.short_side,
        category=args.category,
        weights=args.weights,
        seed=args.seed,
        sample_size=args.sample_size,
        annotations=args.annotations,
    )
    try:
        manifest = export(spec)
    except (FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"manifest written to {manifest}")
    return 0


def entrypoint() -> None:
    sys.exit(main())
