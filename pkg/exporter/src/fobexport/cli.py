"""Command line interface for the embedding exporter."""

from __future__ import annotations

import argparse
import logging
import sys

from . import export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fobexport",
                                     description="Export frozen model embeddings to FOBO files")
    sub = parser.add_subparsers(dest="command", required=True)

    feats = sub.add_parser("export-features", help="embed an image directory")
    feats.add_argument("--images", required=True, help="image directory (per-class subdirs for labels)")
    feats.add_argument("--classes", required=True, help="text file with one class name per line")
    feats.add_argument("--out", required=True, help="output FOBO path")
    feats.add_argument("--model", required=True, help="local checkpoint directory")
    feats.add_argument("--layer", type=int, default=-1, help="vision attention block for Q/K")
    feats.add_argument("--batch-size", type=int, default=8)

    toks = sub.add_parser("export-class-tokens", help="embed class names with the text tower")
    toks.add_argument("--classes", required=True)
    toks.add_argument("--out", required=True, help="output FOBT path")
    toks.add_argument("--model", required=True)

    init = sub.add_parser("init-model", help="create a random local reference checkpoint")
    init.add_argument("--out", required=True)
    init.add_argument("--image-size", type=int, default=64)
    init.add_argument("--patch-size", type=int, default=16)
    init.add_argument("--seed", type=int, default=0)
    return parser


def read_classes(path: str) -> list[str]:
    with open(path) as fh:
        names = [line.strip() for line in fh if line.strip()]
    if not names:
        raise export.ExportError(f"no class names in {path}")
    return names


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export-features":
            manifest = export.export_features(
                args.images, read_classes(args.classes), args.out, args.model,
                layer=args.layer, batch_size=args.batch_size)
            print(f"wrote {manifest.n_records} records to {args.out} "
                  f"(N={manifest.n_patches}, d={manifest.d}, d_k={manifest.d_k}, "
                  f"skipped {len(manifest.skipped)})")
        elif args.command == "export-class-tokens":
            rows = export.export_class_tokens(read_classes(args.classes),
                                              args.out, args.model)
            print(f"wrote {rows.shape[0]} class embeddings of dim {rows.shape[1]} to {args.out}")
        elif args.command == "init-model":
            out = export.init_reference_model(args.out, image_size=args.image_size,
                                              patch_size=args.patch_size, seed=args.seed)
            print(f"saved reference checkpoint to {out}")
    except export.ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
