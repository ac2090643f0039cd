"""Frozen-encoder embedding exporter producing EMB1 files."""

from encoder_exporter.encoder import (
    BadMaxLenError,
    BadPoolingError,
    EncoderError,
    EncoderUnavailableError,
    FrozenEncoder,
    build_demo_encoder,
    load_encoder,
)
from encoder_exporter.export import (
    ExportSpec,
    NonFiniteEmbeddingError,
    RowCountMismatchError,
    export_embeddings,
)

__all__ = [
    "BadMaxLenError",
    "BadPoolingError",
    "EncoderError",
    "EncoderUnavailableError",
    "ExportSpec",
    "FrozenEncoder",
    "NonFiniteEmbeddingError",
    "RowCountMismatchError",
    "build_demo_encoder",
    "export_embeddings",
    "load_encoder",
]
