"""Command line entry point: export-embeddings."""

from __future__ import annotations

import argparse
import sys

from abuse_pipeline.corpus import CorpusError
from abuse_pipeline.features import FeatureError

from encoder_exporter.encoder import POOLING_MODES, EncoderError
from encoder_exporter.export import (
    ExportSpec,
    NonFiniteEmbeddingError,
    RowCountMismatchError,
    export_embeddings,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="export-embeddings",
        description="Run a frozen encoder over a comment corpus and write an EMB1 file.",
    )
    parser.add_argument("--corpus", required=True, help="corpus CSV path")
    parser.add_argument("--encoder", required=True,
                        help="encoder directory or cached encoder name")
    parser.add_argument("--max-len", required=True, type=int,
                        help="token budget per comment, CLS/SEP included")
    parser.add_argument("--pooling", required=True, choices=POOLING_MODES,
                        help="mean over real tokens, or the tanh pooler on the first token")
    parser.add_argument("--out", required=True, help="output EMB1 path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = ExportSpec(
            corpus_path=args.corpus,
            encoder=args.encoder,
            max_len=args.max_len,
            pooling=args.pooling,
            out_path=args.out,
        )
        matrix = export_embeddings(spec)
    except (EncoderError, RowCountMismatchError, NonFiniteEmbeddingError,
            CorpusError, FeatureError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    n, d = matrix.values.shape
    print(f"wrote {args.out}: {n} rows, {d} dims")
    return 0


if __name__ == "__main__":
    sys.exit(main())
