"""ere-bridge: convert checkpoint containers to and from TSA1 archives."""

from __future__ import annotations

import argparse
import sys

from .containers import ContainerError
from .convert import ConversionManifest, ManifestError, from_tsa, to_tsa
from .tsa import TsaError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ere-bridge",
        description="Convert ML checkpoint containers to and from TSA1 tensor archives.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("to-tsa", help="checkpoint (safetensors or torch pickle) -> TSA1")
    p.add_argument("input", help="source checkpoint file")
    p.add_argument("output", help="destination .tsa file")
    p.add_argument("--manifest", default=None,
                   help="JSON manifest with rename globs and dtype casts")
    p.set_defaults(func=cmd_to_tsa)

    p = sub.add_parser("from-tsa", help="TSA1 -> safetensors checkpoint")
    p.add_argument("input", help="source .tsa file")
    p.add_argument("output", help="destination .safetensors file")
    p.add_argument("--manifest", default=None,
                   help="JSON manifest; rename globs are applied inverted")
    p.set_defaults(func=cmd_from_tsa)
    return parser


def cmd_to_tsa(args) -> int:
    record = to_tsa(args.input, args.output, ConversionManifest.load(args.manifest))
    print(f"converted {record['source_format']} checkpoint -> {args.output} "
          f"({len(record['casts'])} casts, {len(record['renames'])} renames)")
    return 0


def cmd_from_tsa(args) -> int:
    record = from_tsa(args.input, args.output, ConversionManifest.load(args.manifest))
    print(f"converted {args.input} -> {args.output} "
          f"({len(record['renames'])} renames)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContainerError, ManifestError, TsaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
