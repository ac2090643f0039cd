"""Corpus-to-EMB1 export built on frozen encoders.

Consumes the training pipeline only through its public corpus and
embedding-file interfaces, so the two packages stay coupled by file
formats rather than internals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from abuse_pipeline.corpus import compose_model_text, load_corpus
from abuse_pipeline.features import EmbeddingMatrix, load_embeddings, write_embeddings

from encoder_exporter.encoder import (
    POOLING_MODES,
    BadMaxLenError,
    BadPoolingError,
    load_encoder,
)


class RowCountMismatchError(Exception):
    pass


class NonFiniteEmbeddingError(Exception):
    pass


@dataclass(frozen=True)
class ExportSpec:
    corpus_path: str
    encoder: str
    max_len: int
    pooling: str
    out_path: str

    def __post_init__(self):
        if self.max_len <= 0:
            raise BadMaxLenError(f"max_len must be positive, got {self.max_len}")
        if self.pooling not in POOLING_MODES:
            raise BadPoolingError(
                f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")


def export_embeddings(
    spec: ExportSpec,
    batch_size: int = 32,
    cache_dir: str | None = None,
) -> EmbeddingMatrix:
    """Write one embedding row per corpus record, then reload and return it.

    Rows follow corpus order. The returned matrix comes from re-reading
    the written file, so a successful call has already proven the output
    loads cleanly.
    """
    corpus = load_corpus(spec.corpus_path, "test")
    # the composed text reads the cleaned field; a raw corpus file has not
    # been through any text stage, so the raw text stands in for it
    records = [
        rec if rec.clean_text else replace(rec, clean_text=rec.raw_text)
        for rec in corpus.records
    ]
    texts = [compose_model_text(rec, spec.max_len) for rec in records]
    encoder = load_encoder(spec.encoder, cache_dir)
    values = encoder.encode(texts, spec.max_len, spec.pooling, batch_size)
    if values.shape[0] != len(corpus.records):
        raise RowCountMismatchError(
            f"encoder produced {values.shape[0]} rows for {len(corpus.records)} records")
    if not np.all(np.isfinite(values)):
        raise NonFiniteEmbeddingError(
            f"encoder produced non-finite values for {spec.encoder!r}")
    write_embeddings(values.astype(np.float32), spec.out_path)
    return load_embeddings(spec.out_path, expected_rows=len(corpus.records))
