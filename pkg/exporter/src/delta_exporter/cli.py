"""Command-line exporter: source checkpoint + manifest -> TNC1 container."""

from __future__ import annotations

import argparse
import sys

from .container import ContainerFormatError
from .export import ExportError, export_checkpoint
from .manifest import Manifest, ManifestError
from .readers import SourceFormatError


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="delta-export")
    ap.add_argument("source", help="checkpoint to convert (.tnc/.npz/.safetensors/.pt)")
    ap.add_argument("out", help="output container path")
    ap.add_argument(
        "--manifest",
        default=None,
        help="JSON manifest with name mappings; defaults to identity mapping",
    )
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = (
            Manifest.from_file(args.manifest) if args.manifest else Manifest.identity()
        )
        nbytes = export_checkpoint(args.source, args.out, manifest)
    except (
        ManifestError,
        ExportError,
        SourceFormatError,
        ContainerFormatError,
        FileNotFoundError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    print(f"wrote {args.out} ({nbytes} bytes)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
