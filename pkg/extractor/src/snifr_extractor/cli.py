"""`snifr-extract`: media clips listed in a CSV manifest -> SNFR1 file."""

from __future__ import annotations

import argparse
import logging
import sys

from .embedders import EmbedderLoadError, load_embedders
from .pipeline import ExtractionJob, extract_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snifr-extract",
        description="Extract pooled 768-d audio/video features into an SNFR1 file")
    parser.add_argument("--manifest", required=True,
                        help="CSV with a path,label header")
    parser.add_argument("--out", required=True, help="output .snfr path")
    parser.add_argument("--device", default="auto",
                        help="cpu, cuda, or auto (default)")
    parser.add_argument("--backend", default="pretrained",
                        choices=["pretrained", "stub"],
                        help="stub swaps in deterministic content-hash embedders")
    return parser


def resolve_device(requested: str) -> str:
    if requested != "auto":
        return requested
    try:
        import torch
        return "cuda" if torch.cuda.is_available() else "cpu"
    except ImportError:
        return "cpu"


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        audio_embedder, video_embedder = load_embedders(
            args.backend, resolve_device(args.device))
    except EmbedderLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    job = ExtractionJob(manifest_path=args.manifest, out_path=args.out)
    try:
        summary = extract_features(job, audio_embedder, video_embedder)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {summary['n_written']}/{summary['n_clips']} clips to {args.out} "
          f"({len(summary['skipped'])} skipped)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
