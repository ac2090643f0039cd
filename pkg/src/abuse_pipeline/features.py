"""Feature construction: tokenization, tf-idf, embedding files, PCA, metadata.

All feature blocks end up in a FeatureMatrix: a dense float64 matrix tagged
with named column blocks so downstream stages can reason about provenance
(tfidf | embedding | pca | metadata | pseudo).
"""

from __future__ import annotations

import struct
import unicodedata
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Corpus, CommentRecord

BLOCK_KINDS = ("tfidf", "embedding", "pca", "metadata", "pseudo")

EMB_MAGIC = b"EMB1"


class FeatureError(ValueError):
    """Base class for feature-construction failures."""


class EmptyCorpusError(FeatureError):
    pass


class RowCountMismatchError(FeatureError):
    pass


class DimMismatchError(FeatureError):
    pass


class BadKError(FeatureError):
    pass


class BadMagicError(FeatureError):
    pass


class TruncatedFileError(FeatureError):
    pass


class TrailingBytesError(FeatureError):
    pass


class NonFiniteValueError(FeatureError):
    pass


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------


def _is_word_char(ch: str) -> bool:
    # Letters, digits, and combining marks count as word characters; marks
    # must stay in so abugida scripts keep their vowel signs attached.
    return unicodedata.category(ch)[0] in ("L", "N", "M")


def tokenize(text: str) -> list[str]:
    """NFC-normalize, lowercase, and split on runs of non-word characters."""
    text = unicodedata.normalize("NFC", text).lower()
    tokens: list[str] = []
    start = -1
    for i, ch in enumerate(text):
        if _is_word_char(ch):
            if start < 0:
                start = i
        elif start >= 0:
            tokens.append(text[start:i])
            start = -1
    if start >= 0:
        tokens.append(text[start:])
    return tokens


# ---------------------------------------------------------------------------
# Tf-idf
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Term-to-column mapping with the document frequencies behind it."""

    terms: tuple[str, ...]          # lexicographically sorted
    doc_freq: tuple[int, ...]       # aligned with terms
    n_docs: int

    def __post_init__(self) -> None:
        if len(self.terms) != len(self.doc_freq):
            raise FeatureError("terms and doc_freq must align")
        if list(self.terms) != sorted(self.terms):
            raise FeatureError("vocabulary terms must be sorted")

    def __len__(self) -> int:
        return len(self.terms)

    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.terms)}

    def idf(self) -> np.ndarray:
        df = np.asarray(self.doc_freq, dtype=np.float64)
        return np.log((1.0 + self.n_docs) / (1.0 + df)) + 1.0


def fit_tfidf(texts: Sequence[str], max_features: int) -> Vocabulary:
    """Select the max_features highest-df terms (ties lexicographic)."""
    if len(texts) == 0:
        raise EmptyCorpusError("cannot fit a vocabulary on zero documents")
    if max_features < 1:
        raise FeatureError(f"max_features must be >= 1, got {max_features}")
    df: dict[str, int] = {}
    for text in texts:
        for term in set(tokenize(text)):
            df[term] = df.get(term, 0) + 1
    chosen = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))[:max_features]
    chosen.sort(key=lambda kv: kv[0])
    return Vocabulary(
        terms=tuple(t for t, _ in chosen),
        doc_freq=tuple(c for _, c in chosen),
        n_docs=len(texts),
    )


def transform_tfidf(vocab: Vocabulary, texts: Sequence[str]) -> "FeatureMatrix":
    """Raw term counts scaled by idf, then L2-normalized per row.

    Rows with no in-vocabulary terms stay all-zero.
    """
    index = vocab.index()
    idf = vocab.idf()
    out = np.zeros((len(texts), len(vocab)), dtype=np.float64)
    for i, text in enumerate(texts):
        for term in tokenize(text):
            j = index.get(term)
            if j is not None:
                out[i, j] += 1.0
    out *= idf[None, :]
    norms = np.sqrt((out * out).sum(axis=1))
    nz = norms > 0.0
    out[nz] /= norms[nz, None]
    return FeatureMatrix(values=out, blocks=(("tfidf", len(vocab)),))


# ---------------------------------------------------------------------------
# Embedding files
#
# Binary layout: magic "EMB1", u32 LE row count, u32 LE dimension, then
# n*d float32 LE values in row-major order. No trailing bytes allowed.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingMatrix:
    values: np.ndarray  # (n, d) float64

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise FeatureError("embedding matrix must be 2-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteValueError("embedding matrix contains non-finite values")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def write_embeddings(values: np.ndarray, path: str) -> None:
    values = np.ascontiguousarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise FeatureError("embedding matrix must be 2-dimensional")
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError("refusing to write non-finite embeddings")
    n, d = values.shape
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(values.tobytes(order="C"))


def load_embeddings(path: str, expected_rows: int) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: too short for a magic header")
    if blob[:4] != EMB_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    n, d = struct.unpack("<II", blob[4:12])
    payload = 12 + 4 * n * d
    if len(blob) < payload:
        raise TruncatedFileError(
            f"{path}: expected {payload} bytes for {n}x{d}, got {len(blob)}"
        )
    if len(blob) > payload:
        raise TrailingBytesError(f"{path}: {len(blob) - payload} trailing bytes")
    values = np.frombuffer(blob, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError(f"{path}: non-finite embedding values")
    if n != expected_rows:
        raise RowCountMismatchError(
            f"{path}: file has {n} rows, corpus has {expected_rows}"
        )
    return EmbeddingMatrix(values=values)


def synthesize_embeddings(
    corpus: Corpus, dim: int, seed: int, separation: float = 4.0
) -> np.ndarray:
    """Gaussian clusters standing in for a text encoder's output.

    Cluster assignment follows what the text *says* (the lexicon-implied
    label plus the language), not the stored label, mirroring how a real
    encoder sees content rather than annotations. Returns float32 (n, dim).
    """
    from .corpus import implied_label

    if dim < 1:
        raise FeatureError(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(dim)
    axis /= np.sqrt((axis * axis).sum())
    langs = sorted(set(corpus.languages()))
    offsets = {lang: rng.standard_normal(dim) for lang in langs}
    out = np.empty((len(corpus), dim), dtype=np.float64)
    for i, rec in enumerate(corpus.records):
        lab = implied_label(rec, tokenize)
        center = separation * lab * axis + offsets[rec.language]
        out[i] = center + rng.standard_normal(dim)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray                 # (d,)
    components: np.ndarray           # (k, d), orthonormal rows
    explained_variance: np.ndarray   # (k,), non-increasing

    def __post_init__(self) -> None:
        k = self.components.shape[0]
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(k), atol=1e-9):
            raise FeatureError("components are not orthonormal")
        ev = self.explained_variance
        if np.any(ev[1:] > ev[:-1] + 1e-12):
            raise FeatureError("explained_variance must be non-increasing")

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]


def fit_pca(values: np.ndarray | EmbeddingMatrix, k: int) -> PcaModel:
    """PCA of mean-centered rows via SVD.

    Sign convention: the largest-magnitude entry of each component is
    non-negative. Zero-variance data yields zero explained variance.
    """
    X = values.values if isinstance(values, EmbeddingMatrix) else np.asarray(values, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise BadKError(f"need at least 2 rows to fit, got {n}")
    if k < 1 or k > min(n, d):
        raise BadKError(f"k must be in [1, {min(n, d)}], got {k}")
    mean = X.mean(axis=0)
    centered = X - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k].copy()
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0.0:
            row *= -1.0
    explained = (s[:k] ** 2) / (n - 1)
    return PcaModel(mean=mean, components=components, explained_variance=explained)


def apply_pca(model: PcaModel, values: np.ndarray | EmbeddingMatrix) -> "FeatureMatrix":
    X = values.values if isinstance(values, EmbeddingMatrix) else np.asarray(values, dtype=np.float64)
    if X.shape[1] != model.dim:
        raise DimMismatchError(
            f"model expects dimension {model.dim}, got {X.shape[1]}"
        )
    projected = (X - model.mean) @ model.components.T
    return FeatureMatrix(values=projected, blocks=(("pca", model.k),))


# ---------------------------------------------------------------------------
# Metadata and assembly
# ---------------------------------------------------------------------------


def metadata_features(record: CommentRecord, transform: str = "log1p") -> np.ndarray:
    """Two engagement features per comment: like and report intensity."""
    likes = float(record.like_count)
    reports = float(record.report_count)
    if transform == "log1p":
        return np.array([np.log1p(likes), np.log1p(reports)])
    if transform == "raw":
        return np.array([likes, reports])
    raise FeatureError(f"unknown metadata transform {transform!r}")


def metadata_block(corpus: Corpus, transform: str = "log1p") -> "FeatureMatrix":
    values = np.stack([metadata_features(rec, transform) for rec in corpus.records]) \
        if len(corpus) else np.zeros((0, 2))
    return FeatureMatrix(values=values, blocks=(("metadata", 2),))


def embedding_block(emb: EmbeddingMatrix) -> "FeatureMatrix":
    return FeatureMatrix(values=emb.values.copy(), blocks=(("embedding", emb.dim),))


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense feature matrix whose columns are partitioned into named blocks."""

    values: np.ndarray                     # (n, width) float64
    blocks: tuple[tuple[str, int], ...]    # (kind, width) in column order

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise FeatureError("feature matrix must be 2-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteValueError("feature matrix contains non-finite values")
        widths = sum(w for _, w in self.blocks)
        if widths != self.values.shape[1]:
            raise FeatureError(
                f"block widths sum to {widths} but matrix has {self.values.shape[1]} columns"
            )
        for kind, w in self.blocks:
            if kind not in BLOCK_KINDS:
                raise FeatureError(f"unknown block kind {kind!r}")
            if w < 0:
                raise FeatureError(f"negative block width for {kind}")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def take_rows(self, idx: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(values=self.values[idx], blocks=self.blocks)

    def with_column(self, column: np.ndarray, kind: str) -> "FeatureMatrix":
        """Append one extra column as its own block (used for pseudo features)."""
        col = np.asarray(column, dtype=np.float64).reshape(-1, 1)
        if col.shape[0] != self.n_rows:
            raise RowCountMismatchError(
                f"column has {col.shape[0]} rows, matrix has {self.n_rows}"
            )
        return FeatureMatrix(
            values=np.hstack([self.values, col]),
            blocks=self.blocks + ((kind, 1),),
        )


def assemble_features(parts: Sequence[FeatureMatrix]) -> FeatureMatrix:
    """Concatenate feature blocks column-wise; all parts must agree on rows."""
    if not parts:
        raise FeatureError("nothing to assemble")
    n = parts[0].n_rows
    for part in parts[1:]:
        if part.n_rows != n:
            raise RowCountMismatchError(
                f"row counts differ: {n} vs {part.n_rows}"
            )
    values = np.hstack([part.values for part in parts])
    blocks: tuple[tuple[str, int], ...] = ()
    for part in parts:
        blocks += part.blocks
    return FeatureMatrix(values=values, blocks=blocks)
