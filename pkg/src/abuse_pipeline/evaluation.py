"""Metrics, threshold calibration, and label-noise diagnostics.

Everything here produces data (reports, TSV exports); figure rendering is
deliberately left to the CLI layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus
from .features import EmbeddingMatrix, apply_pca, fit_pca
from .gbdt import GbdtParams, fit_gbdt, predict_proba


class EvaluationError(ValueError):
    """Base class for metric and calibration failures."""


class LengthMismatchError(EvaluationError):
    pass


class EmptyInputError(EvaluationError):
    pass


class MissingLabelError(EvaluationError):
    pass


AVERAGING_MODES = ("positive", "macro", "weighted")


def _check_pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape[0] != y_pred.shape[0]:
        raise LengthMismatchError(
            f"{y_true.shape[0]} labels vs {y_pred.shape[0]} predictions"
        )
    if y_true.shape[0] == 0:
        raise EmptyInputError("no samples")
    return y_true, y_pred


def confusion_counts(y_true, y_pred) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) with class 1 as positive."""
    y_true, y_pred = _check_pair(y_true, y_pred)
    tp = int(np.count_nonzero((y_true == 1) & (y_pred == 1)))
    fp = int(np.count_nonzero((y_true == 0) & (y_pred == 1)))
    fn = int(np.count_nonzero((y_true == 1) & (y_pred == 0)))
    tn = int(np.count_nonzero((y_true == 0) & (y_pred == 0)))
    return tp, fp, fn, tn


def _class_f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def f1_score(y_true, y_pred, averaging: str = "positive") -> float:
    """Binary F1. A class with zero actual and predicted members scores 0."""
    if averaging not in AVERAGING_MODES:
        raise EvaluationError(f"unknown averaging {averaging!r}")
    tp, fp, fn, tn = confusion_counts(y_true, y_pred)
    f1_pos = _class_f1(tp, fp, fn)
    if averaging == "positive":
        return f1_pos
    # for class 0, tn plays tp's role and the error cells swap
    f1_neg = _class_f1(tn, fn, fp)
    if averaging == "macro":
        return (f1_pos + f1_neg) / 2.0
    n_pos = tp + fn
    n_neg = tn + fp
    return (n_pos * f1_pos + n_neg * f1_neg) / (n_pos + n_neg)


@dataclass(frozen=True)
class MetricReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    macro_f1: float
    weighted_f1: float
    false_positive_rate: float

    def to_text(self) -> str:
        lines = [
            f"tp={self.tp}",
            f"fp={self.fp}",
            f"fn={self.fn}",
            f"tn={self.tn}",
            f"precision={self.precision:.6f}",
            f"recall={self.recall:.6f}",
            f"f1={self.f1:.6f}",
            f"macro_f1={self.macro_f1:.6f}",
            f"weighted_f1={self.weighted_f1:.6f}",
            f"false_positive_rate={self.false_positive_rate:.6f}",
        ]
        return "\n".join(lines) + "\n"


def compute_metrics(y_true, y_pred) -> MetricReport:
    tp, fp, fn, tn = confusion_counts(y_true, y_pred)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    return MetricReport(
        tp=tp, fp=fp, fn=fn, tn=tn,
        precision=precision,
        recall=recall,
        f1=f1_score(y_true, y_pred, "positive"),
        macro_f1=f1_score(y_true, y_pred, "macro"),
        weighted_f1=f1_score(y_true, y_pred, "weighted"),
        false_positive_rate=fpr,
    )


# ---------------------------------------------------------------------------
# Threshold tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdMap:
    global_threshold: float = 0.5
    per_language: tuple[tuple[str, float], ...] = ()

    def __post_init__(self) -> None:
        for name, value in (("global", self.global_threshold),) + tuple(
            (lang, v) for lang, v in self.per_language
        ):
            if not 0.0 <= value <= 1.0:
                raise EvaluationError(f"threshold for {name} outside [0, 1]: {value}")

    def get(self, language: str) -> float:
        for lang, value in self.per_language:
            if lang == language:
                return value
        return self.global_threshold


def threshold_grid(step: float) -> list[float]:
    """Multiples of step on [0, 1], always including 0.5 and 1.0."""
    if not 0.0 < step <= 1.0:
        raise EvaluationError(f"grid step must be in (0, 1], got {step}")
    values = {0.5, 1.0}
    for j in range(int(math.floor(1.0 / step)) + 1):
        v = j * step
        if v <= 1.0:
            values.add(v)
    return sorted(values)


def _best_threshold(probs: np.ndarray, y: np.ndarray, grid: Sequence[float]) -> float:
    best_t = grid[0]
    best_f1 = -1.0
    for t in grid:  # ascending, >= keeps the highest tied threshold
        f1 = f1_score(y, (probs >= t).astype(np.int64), "positive")
        if f1 >= best_f1:
            best_f1 = f1
            best_t = t
    return best_t


def tune_thresholds(
    probs,
    y_true,
    languages: Sequence[str],
    grid_step: float = 0.01,
    min_count: int = 50,
) -> ThresholdMap:
    """Per-language argmax of positive-class F1 over the grid.

    Languages with fewer than min_count samples are left to the global
    threshold, which is tuned on all samples.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if probs.shape[0] == 0:
        raise EmptyInputError("no samples to tune on")
    if not (probs.shape[0] == y_true.shape[0] == len(languages)):
        raise LengthMismatchError(
            f"probs {probs.shape[0]}, labels {y_true.shape[0]}, "
            f"languages {len(languages)}"
        )
    grid = threshold_grid(grid_step)
    global_t = _best_threshold(probs, y_true, grid)
    langs_arr = np.asarray(languages)
    per_language: list[tuple[str, float]] = []
    for lang in sorted(set(languages)):
        idx = np.nonzero(langs_arr == lang)[0]
        if idx.shape[0] >= min_count:
            per_language.append((lang, _best_threshold(probs[idx], y_true[idx], grid)))
    return ThresholdMap(global_threshold=global_t, per_language=tuple(per_language))


def apply_thresholds(probs, languages: Sequence[str], tmap: ThresholdMap) -> np.ndarray:
    """Label 1 iff probability >= the language's threshold (global fallback)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] != len(languages):
        raise LengthMismatchError(
            f"probs {probs.shape[0]} vs languages {len(languages)}"
        )
    thresholds = np.array([tmap.get(lang) for lang in languages])
    return (probs >= thresholds).astype(np.int64)


# ---------------------------------------------------------------------------
# Label flips and the noise probe
# ---------------------------------------------------------------------------


def flip_labels(corpus: Corpus) -> Corpus:
    """Replace every label y with 1-y. Applying twice restores the corpus."""
    for rec in corpus.records:
        if rec.label is None:
            raise MissingLabelError(f"record {rec.id!r} has no label to flip")
    return corpus.with_records(
        replace(rec, label=1 - rec.label) for rec in corpus.records
    )


@dataclass(frozen=True)
class NoiseReport:
    """What retraining on the misclassified subset says about label noise."""

    n_total: int
    n_misclassified: int
    misclassified_fraction: float
    subset_positive_count: int
    subset_negative_count: int
    opposite_rate_subset: float
    opposite_rate_complement: float
    flip_recall: float | None
    flip_precision: float | None
    no_misclassified: bool = False

    def to_text(self) -> str:
        def fmt(v):
            return "none" if v is None else f"{v:.6f}"

        lines = [
            f"n_total={self.n_total}",
            f"n_misclassified={self.n_misclassified}",
            f"misclassified_fraction={self.misclassified_fraction:.6f}",
            f"subset_positive_count={self.subset_positive_count}",
            f"subset_negative_count={self.subset_negative_count}",
            f"opposite_rate_subset={self.opposite_rate_subset:.6f}",
            f"opposite_rate_complement={self.opposite_rate_complement:.6f}",
            f"flip_recall={fmt(self.flip_recall)}",
            f"flip_precision={fmt(self.flip_precision)}",
            f"no_misclassified={int(self.no_misclassified)}",
        ]
        return "\n".join(lines) + "\n"


def noise_probe(
    corpus: Corpus,
    X,
    oof_probs,
    thresholds: ThresholdMap,
    params: GbdtParams,
    seed: int,
    flip_ids: frozenset[str] | set[str] | None = None,
) -> NoiseReport:
    """Harvest the misclassified subset S, retrain on S, measure disagreement.

    The fresh model is fit on S with S's stored labels; opposite-prediction
    rates count predictions (at 0.5) that contradict stored labels, on S and
    on its complement. When a ground-truth flip set is supplied, recall and
    precision of S against it are reported; otherwise they are None.
    """
    y = corpus.labels()
    langs = corpus.languages()
    probs = np.asarray(
        oof_probs.probs if hasattr(oof_probs, "probs") else oof_probs,
        dtype=np.float64,
    )
    if probs.shape[0] != len(corpus):
        raise LengthMismatchError(
            f"probs {probs.shape[0]} vs corpus {len(corpus)}"
        )
    n = len(corpus)
    preds = apply_thresholds(probs, langs, thresholds)
    mis = preds != y
    subset = np.nonzero(mis)[0]

    flip_mask = None
    if flip_ids is not None:
        ids = corpus.ids()
        flip_mask = np.array([rid in flip_ids for rid in ids], dtype=bool)

    if subset.shape[0] == 0:
        return NoiseReport(
            n_total=n,
            n_misclassified=0,
            misclassified_fraction=0.0,
            subset_positive_count=0,
            subset_negative_count=0,
            opposite_rate_subset=0.0,
            opposite_rate_complement=0.0,
            flip_recall=None if flip_mask is None else 0.0,
            flip_precision=None if flip_mask is None else 0.0,
            no_misclassified=True,
        )

    values = X.values if hasattr(X, "values") else np.asarray(X, dtype=np.float64)
    model = fit_gbdt(values[subset], y[subset], replace(params, seed=seed))
    refit_preds = (predict_proba(model, values) >= 0.5).astype(np.int64)
    opposite = refit_preds != y
    complement = np.nonzero(~mis)[0]
    rate_subset = float(opposite[subset].mean())
    rate_complement = float(opposite[complement].mean()) if complement.shape[0] else 0.0

    flip_recall = flip_precision = None
    if flip_mask is not None:
        hit = int(np.count_nonzero(flip_mask & mis))
        total_flips = int(np.count_nonzero(flip_mask))
        flip_recall = hit / total_flips if total_flips else 0.0
        flip_precision = hit / subset.shape[0]

    pos = int(y[subset].sum())
    return NoiseReport(
        n_total=n,
        n_misclassified=int(subset.shape[0]),
        misclassified_fraction=subset.shape[0] / n,
        subset_positive_count=pos,
        subset_negative_count=int(subset.shape[0]) - pos,
        opposite_rate_subset=rate_subset,
        opposite_rate_complement=rate_complement,
        flip_recall=flip_recall,
        flip_precision=flip_precision,
    )


def pca_scatter_export(
    values,
    labels: Sequence[int],
    out_path: str,
    flagged: Sequence[bool] | None = None,
) -> None:
    """Project rows to 2 principal components and write a TSV scatter table.

    Columns: x, y (6 decimal places), label, flagged (empty when no flag
    set is supplied). Byte-identical across reruns on identical input.
    """
    X = values.values if isinstance(values, EmbeddingMatrix) else np.asarray(values, dtype=np.float64)
    if X.shape[0] != len(labels):
        raise LengthMismatchError(f"{X.shape[0]} rows vs {len(labels)} labels")
    if flagged is not None and len(flagged) != X.shape[0]:
        raise LengthMismatchError(
            f"{X.shape[0]} rows vs {len(flagged)} flags"
        )
    model = fit_pca(X, 2)
    proj = apply_pca(model, X).values
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x\ty\tlabel\tflagged\n")
        for i in range(X.shape[0]):
            flag = "" if flagged is None else str(int(bool(flagged[i])))
            fh.write(f"{proj[i, 0]:.6f}\t{proj[i, 1]:.6f}\t{int(labels[i])}\t{flag}\n")
