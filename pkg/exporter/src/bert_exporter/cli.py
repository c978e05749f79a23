"""Command-line front end: `msnet-export`.

Exit codes follow the classifier's convention: 0 on success, 1 for
validation problems (bad flags, tokenization mismatch, geometry guard),
2 for I/O and file-format problems.
"""

from __future__ import annotations

import argparse
import logging
import sys

from msnet.errors import FormatError, MsnetError

from . import __version__
from .export import PRESETS, ExportError, ExportSpec, ListingError, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msnet-export",
        description="Export per-token BERT hidden states to an MSEB file.",
    )
    parser.add_argument(
        "--version", action="version", version=f"msnet-export {__version__}"
    )
    parser.add_argument(
        "--model",
        choices=sorted(PRESETS),
        help="published geometry to hold the weights to (sets the expected "
        "encoder depth, hidden size, and case folding)",
    )
    parser.add_argument(
        "--weights",
        required=True,
        help="local directory with the pretrained encoder (config + weights)",
    )
    parser.add_argument(
        "--vocab",
        help="WordPiece vocabulary for the cross-check "
        "(default: vocab.txt inside --weights)",
    )
    parser.add_argument(
        "--docs",
        required=True,
        help="tokenized-doc JSONL listing (written by `msnet tokenize --docs-out`)",
    )
    parser.add_argument(
        "--out", required=True, help="MSEB file to write"
    )
    parser.add_argument(
        "--layers",
        type=int,
        required=True,
        help="number of hidden layers to export, topmost first",
    )
    parser.add_argument(
        "--batch", type=int, default=8, help="inference batch size (default 8)"
    )
    parser.add_argument(
        "--lowercase",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="fold case before the WordPiece cross-check "
        "(default: from --model, else off)",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log progress to stderr"
    )
    return parser


def spec_from_args(args: argparse.Namespace) -> ExportSpec:
    expect_layers = expect_hidden = None
    lowercase = False
    if args.model is not None:
        preset = PRESETS[args.model]
        expect_layers = preset.encoder_layers
        expect_hidden = preset.hidden_size
        lowercase = preset.lowercase
    if args.lowercase is not None:
        lowercase = args.lowercase
    return ExportSpec(
        weights=args.weights,
        docs=args.docs,
        out=args.out,
        layers=args.layers,
        vocab=args.vocab,
        lowercase=lowercase,
        expect_layers=expect_layers,
        expect_hidden=expect_hidden,
        batch_size=args.batch,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
    )
    try:
        spec = spec_from_args(args)
        count = export(spec)
    except (ListingError, FormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ExportError, MsnetError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"exported {count} documents x {spec.layers} layers to {spec.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
