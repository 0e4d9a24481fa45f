"""Command line front end: one corruption per run, flags mirror ExtractJob."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ExtractError
from .extract import ExtractJob, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dinofeat",
        description="Extract patch features from images into .mirf files.",
    )
    parser.add_argument("images", nargs="+", type=Path,
                        help="image files, or directories scanned non-recursively")
    parser.add_argument("--out", type=Path, required=True,
                        help="output directory for .mirf files and the manifest")
    parser.add_argument("--encoder", default="seeded-large")
    parser.add_argument("--corruption", default="clean",
                        help="clean | jpeg:QF | resize:SCALE | blur:SIGMA")
    parser.add_argument("--label", choices=("real", "generated"), default="real",
                        help="class label recorded for every image in this run")
    parser.add_argument("--manifest-name", default="manifest.json")
    return parser


def _expand(paths: list[Path]) -> tuple[Path, ...]:
    out: list[Path] = []
    for p in paths:
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.is_file()))
        else:
            out.append(p)
    return tuple(out)


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        job = ExtractJob(
            inputs=_expand(args.images),
            out_dir=args.out,
            encoder=args.encoder,
            corruption=args.corruption,
            label=0 if args.label == "real" else 1,
            manifest_name=args.manifest_name,
        )
        manifest = extract(job)
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
