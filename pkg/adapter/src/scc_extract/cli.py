"""scc-extract: run a backbone or matcher over images and emit engine files."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import AdapterError
from .export import AdapterConfig, export_features, export_matches

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def cmd_features(args) -> int:
    cfg = AdapterConfig(backbone=args.model, device=args.device, flip_rows=args.flip_rows)
    src = Path(args.in_dir)
    images = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        print(f"no images found under {src}", file=sys.stderr)
        return 2
    written = export_features(images, cfg, args.out)
    print(f"wrote {len(written)} feature files to {args.out}")
    return 0


def cmd_matches(args) -> int:
    cfg = AdapterConfig(matcher=args.model, device=args.device)
    dest = export_matches(args.query, args.db, cfg, args.out)
    print(f"wrote {dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scc-extract")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="export dense feature files")
    p.add_argument("--model", default="grid-stats",
                   help="backbone id: grid-stats, grid-stats:<N>, hf:<model-id>")
    p.add_argument("--in", dest="in_dir", required=True, help="input image directory")
    p.add_argument("--out", required=True, help="output directory for SCCF files")
    p.add_argument("--device", default="cpu")
    p.add_argument("--flip-rows", action="store_true",
                   help="flip grid rows for north-up tile imagery")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("matches", help="export dense matches for an image pair")
    p.add_argument("--model", default="ncc-grid",
                   help="matcher id: ncc-grid or ncc-grid:<N>")
    p.add_argument("--query", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_matches)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AdapterError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
