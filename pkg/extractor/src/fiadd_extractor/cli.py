"""Command-line wrapper: text records in, embedding dump out."""

from __future__ import annotations

import argparse
import sys

from .encoders import EncoderError
from .extract import ExtractError, extract


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fiadd-extract",
        description="encode labeled texts (and implied-meaning annotations) "
                    "into the fiadd embedding wire format")
    parser.add_argument("--input", required=True, help="line-delimited text records")
    parser.add_argument("--output", required=True, help="embedding dump destination")
    parser.add_argument("--encoder", default="bert-base-uncased",
                        help="transformers model name, or offline[-<dim>]")
    parser.add_argument("--pooling", choices=["cls", "mean"], default="cls")
    parser.add_argument("--class-names", default=None,
                        help="comma-separated names, one per label id")
    parser.add_argument("--implicit-labels", default=None,
                        help="comma-separated label ids carrying implied meanings")
    parser.add_argument("--batch-size", type=int, default=16)
    args = parser.parse_args(argv)

    class_names = args.class_names.split(",") if args.class_names else None
    implicit = (
        {int(v) for v in args.implicit_labels.split(",") if v.strip() != ""}
        if args.implicit_labels is not None else None
    )
    try:
        count = extract(args.input, args.output, encoder_name=args.encoder,
                        pooling=args.pooling, class_names=class_names,
                        implicit_labels=implicit, batch_size=args.batch_size)
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EncoderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {count} records to {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
