"""Stratified folds, out-of-fold stacking, pseudo-labeling, ensembling.

The discipline throughout: a record's out-of-fold probability is produced by
a model that never saw that record's fold during training, and any derived
feature attached to a training row is computed entirely from data outside
that row's own fold. Changing the labels of one fold therefore cannot move
the out-of-fold outputs of that fold's records, exactly, at every stage.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .evaluation import f1_score
from .features import FeatureMatrix
from .gbdt import GbdtModel, GbdtParams, fit_gbdt, predict_proba

THREADS_ENV = "ABUSE_PIPELINE_THREADS"


class PipelineError(ValueError):
    """Base class for stacking and ensembling failures."""


class BadKError(PipelineError):
    pass


class FoldTooSmallError(PipelineError):
    pass


class NoModelsError(PipelineError):
    pass


class ModelMismatchError(PipelineError):
    pass


def thread_count() -> int:
    """Worker count from the environment; never affects results, only speed."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 10
    min_language_samples: int = 50
    pseudo_max_iters: int = 3
    pseudo_epsilon: float = 1e-4
    ensemble_grid_step: float = 0.05
    f1_averaging: str = "positive"
    pseudo_hard_labels: bool = False
    seed: int = 0
    gbdt: GbdtParams = field(default_factory=GbdtParams)

    def __post_init__(self) -> None:
        if self.k < 2:
            raise BadKError(f"k must be >= 2, got {self.k}")
        if self.min_language_samples < 1:
            raise PipelineError("min_language_samples must be >= 1")
        if self.pseudo_max_iters < 0:
            raise PipelineError("pseudo_max_iters must be >= 0")
        if self.pseudo_epsilon < 0.0:
            raise PipelineError("pseudo_epsilon must be >= 0")
        if not 0.0 < self.ensemble_grid_step <= 1.0:
            raise PipelineError("ensemble_grid_step must be in (0, 1]")
        if self.f1_averaging not in ("positive", "macro", "weighted"):
            raise PipelineError(f"unknown f1_averaging {self.f1_averaging!r}")


# ---------------------------------------------------------------------------
# Fold assignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray  # (n,) int64 values in [0, k)
    k: int

    def __post_init__(self) -> None:
        if self.k < 2:
            raise BadKError(f"k must be >= 2, got {self.k}")
        if self.fold_of.shape[0] and (
            self.fold_of.min() < 0 or self.fold_of.max() >= self.k
        ):
            raise PipelineError("fold ids out of range")

    @property
    def n(self) -> int:
        return int(self.fold_of.shape[0])

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)


def make_folds(labels, languages: Sequence[str] | None = None, k: int = 10, seed: int = 0) -> FoldAssignment:
    """Stratified assignment: within each (label, language) cell the fold
    sizes differ by at most one. A rotating offset keeps the overall fold
    sizes balanced across cells.

    Accepts either a labeled corpus or explicit (labels, languages) arrays.
    """
    if hasattr(labels, "labels") and callable(labels.labels):
        corpus = labels
        languages = corpus.languages()
        labels = corpus.labels()
    elif languages is None:
        raise PipelineError("languages are required when passing raw labels")
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if k < 2 or k > n:
        raise BadKError(f"k must be in [2, {n}], got {k}")
    if len(languages) != n:
        raise PipelineError(f"{n} labels vs {len(languages)} languages")

    cells: dict[tuple[int, str], list[int]] = {}
    for i in range(n):
        cells.setdefault((int(labels[i]), languages[i]), []).append(i)

    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    offset = 0
    for key in sorted(cells):
        idx = np.array(cells[key], dtype=np.int64)
        idx = idx[rng.permutation(idx.shape[0])]
        fold_of[idx] = (offset + np.arange(idx.shape[0])) % k
        offset = (offset + idx.shape[0]) % k
    return FoldAssignment(fold_of=fold_of, k=k)


# ---------------------------------------------------------------------------
# Out-of-fold training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OofPredictions:
    probs: np.ndarray
    folds: FoldAssignment
    producer: str

    def __post_init__(self) -> None:
        if self.probs.shape[0] != self.folds.n:
            raise PipelineError(
                f"{self.probs.shape[0]} probabilities vs {self.folds.n} fold ids"
            )
        if self.probs.shape[0] and (
            self.probs.min() <= 0.0 or self.probs.max() >= 1.0
        ):
            raise PipelineError("out-of-fold probabilities must lie inside (0, 1)")


@dataclass
class TrainOofResult:
    models: list[GbdtModel]
    oof: OofPredictions
    test_probs: np.ndarray | None


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)


def train_oof(
    X,
    y: Sequence[int],
    folds: FoldAssignment,
    params: GbdtParams,
    X_test=None,
    producer: str = "pooled",
) -> TrainOofResult:
    """One model per fold, each trained on the fold's complement.

    A record's OOF probability comes from the model that excluded its fold;
    the optional test prediction is the mean over all k fold models.
    """
    values = _values(X)
    y = np.asarray(y, dtype=np.int64)
    n = values.shape[0]
    if n != folds.n or n != y.shape[0]:
        raise PipelineError("rows, labels, and fold ids must align")
    test_values = None if X_test is None else _values(X_test)

    fold_of = folds.fold_of
    k = folds.k

    def fit_one(j: int):
        train_mask = fold_of != j
        if not train_mask.any():
            raise FoldTooSmallError(f"fold {j} leaves no training rows")
        model = fit_gbdt(values[train_mask], y[train_mask], params)
        val_idx = np.nonzero(fold_of == j)[0]
        val_probs = predict_proba(model, values[val_idx]) if val_idx.shape[0] else np.empty(0)
        test_probs = None if test_values is None else predict_proba(model, test_values)
        return model, val_idx, val_probs, test_probs

    workers = min(thread_count(), k)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fit_one, range(k)))
    else:
        results = [fit_one(j) for j in range(k)]

    models: list[GbdtModel] = []
    oof = np.empty(n, dtype=np.float64)
    test_sum = None
    for model, val_idx, val_probs, test_probs in results:  # fold order
        models.append(model)
        oof[val_idx] = val_probs
        if test_probs is not None:
            test_sum = test_probs if test_sum is None else test_sum + test_probs
    test_mean = None if test_sum is None else test_sum / k
    return TrainOofResult(
        models=models,
        oof=OofPredictions(probs=oof, folds=folds, producer=producer),
        test_probs=test_mean,
    )


@dataclass
class LanguageWiseResult:
    oof: OofPredictions
    models: dict[str, list[GbdtModel]]
    fallback_languages: tuple[str, ...]
    test_probs: np.ndarray | None


def train_oof_language_wise(
    languages: Sequence[str],
    X,
    y: Sequence[int],
    folds: FoldAssignment,
    params: GbdtParams,
    min_language_samples: int,
    pooled: TrainOofResult,
    X_test=None,
    test_languages: Sequence[str] | None = None,
    producer: str = "language_wise",
) -> LanguageWiseResult:
    """Per-language fold models; sparse languages fall back to the pooled
    result and are flagged. Test rows follow their own language's models."""
    values = _values(X)
    y = np.asarray(y, dtype=np.int64)
    n = values.shape[0]
    if n != folds.n or n != y.shape[0] or n != len(languages):
        raise PipelineError("rows, labels, languages, and fold ids must align")
    if X_test is not None and test_languages is None:
        raise PipelineError("test features require test languages")
    test_values = None if X_test is None else _values(X_test)

    langs_arr = np.asarray(languages)
    fold_of = folds.fold_of
    k = folds.k

    oof = pooled.oof.probs.copy()
    test_probs = None
    if test_values is not None:
        if pooled.test_probs is None:
            raise PipelineError("pooled result lacks test predictions")
        test_probs = pooled.test_probs.copy()

    models: dict[str, list[GbdtModel]] = {}
    fallback: list[str] = []
    for lang in sorted(set(languages)):
        lang_idx = np.nonzero(langs_arr == lang)[0]
        lang_folds = fold_of[lang_idx]
        counts = np.bincount(lang_folds, minlength=k)
        if lang_idx.shape[0] < min_language_samples or np.any(
            lang_idx.shape[0] - counts == 0
        ):
            fallback.append(lang)
            continue
        lang_models: list[GbdtModel] = []
        lang_test_sum = None
        if test_values is not None:
            test_lang_idx = np.nonzero(np.asarray(test_languages) == lang)[0]
        for j in range(k):
            tr = lang_idx[lang_folds != j]
            va = lang_idx[lang_folds == j]
            model = fit_gbdt(values[tr], y[tr], params)
            lang_models.append(model)
            if va.shape[0]:
                oof[va] = predict_proba(model, values[va])
            if test_values is not None and test_lang_idx.shape[0]:
                p = predict_proba(model, test_values[test_lang_idx])
                lang_test_sum = p if lang_test_sum is None else lang_test_sum + p
        models[lang] = lang_models
        if test_values is not None and lang_test_sum is not None:
            test_probs[test_lang_idx] = lang_test_sum / k

    return LanguageWiseResult(
        oof=OofPredictions(probs=oof, folds=folds, producer=producer),
        models=models,
        fallback_languages=tuple(fallback),
        test_probs=test_probs,
    )


# ---------------------------------------------------------------------------
# Pseudo-label iterations
#
# Each iteration appends one probability column and refits. The column a
# *training* row sees is produced inside its fold's complement by an inner
# out-of-fold pass (so fold j's labels can never reach fold j's features);
# the column a *validation* row sees is the previous outer out-of-fold
# probability for that row. Iterations stop early once the out-of-fold F1
# stops improving by at least epsilon; the best iteration wins.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PseudoIteration:
    iteration: int
    oof_f1: float
    feature_width: int


@dataclass
class PseudoResult:
    oof: OofPredictions
    best_iteration: int
    trace: list[PseudoIteration]
    test_probs: np.ndarray | None
    pseudo_features: np.ndarray  # (n, iterations) columns appended per iteration
    outer_models: list[list[GbdtModel]]  # [iteration][fold]


def _inner_oof(values: np.ndarray, y: np.ndarray, inner_folds: np.ndarray,
               params: GbdtParams) -> np.ndarray:
    """Plain OOF probabilities over an arbitrary fold labeling."""
    probs = np.empty(values.shape[0], dtype=np.float64)
    for v in np.unique(inner_folds):
        tr = inner_folds != v
        if not tr.any():
            raise FoldTooSmallError("inner fold leaves no training rows")
        model = fit_gbdt(values[tr], y[tr], params)
        probs[~tr] = predict_proba(model, values[~tr])
    return probs


def pseudo_label_iteration(
    X,
    y: Sequence[int],
    folds: FoldAssignment,
    prior: OofPredictions,
    params: GbdtParams,
    max_iters: int = 3,
    epsilon: float = 1e-4,
    X_test=None,
    prior_test: np.ndarray | None = None,
    hard_labels: bool = False,
    averaging: str = "positive",
    producer: str = "pseudo",
) -> PseudoResult:
    values = _values(X)
    y = np.asarray(y, dtype=np.int64)
    n = values.shape[0]
    if n != folds.n or n != y.shape[0] or n != prior.probs.shape[0]:
        raise PipelineError("rows, labels, folds, and prior must align")
    if max_iters < 1:
        raise PipelineError(f"max_iters must be >= 1, got {max_iters}")
    if X_test is not None and prior_test is None:
        raise PipelineError("test features require a prior test prediction")
    test_values = None if X_test is None else _values(X_test)

    fold_of = folds.fold_of
    k = folds.k

    def transform(col: np.ndarray) -> np.ndarray:
        return (col >= 0.5).astype(np.float64) if hard_labels else col

    comp_idx = [np.nonzero(fold_of != j)[0] for j in range(k)]
    val_idx = [np.nonzero(fold_of == j)[0] for j in range(k)]
    inner_cols = [np.empty((comp_idx[j].shape[0], 0)) for j in range(k)]
    outer_cols = np.empty((n, 0))
    test_cols = None if test_values is None else np.empty((test_values.shape[0], 0))

    prev_f1 = f1_score(y, (prior.probs >= 0.5).astype(np.int64), averaging)
    prev_outer = prior.probs
    prev_test = prior_test

    best_f1 = -1.0
    best_oof: np.ndarray | None = None
    best_test: np.ndarray | None = None
    best_iter = 0
    trace: list[PseudoIteration] = []
    outer_models: list[list[GbdtModel]] = []

    workers = thread_count()

    for t in range(1, max_iters + 1):
        # training-side column t: inner OOF inside each complement
        def inner_col(j: int) -> np.ndarray:
            rows = comp_idx[j]
            Xj = np.hstack([values[rows], inner_cols[j]])
            return _inner_oof(Xj, y[rows], fold_of[rows], params)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=min(workers, k)) as pool:
                new_inner = list(pool.map(inner_col, range(k)))
        else:
            new_inner = [inner_col(j) for j in range(k)]
        for j in range(k):
            inner_cols[j] = np.hstack(
                [inner_cols[j], transform(new_inner[j]).reshape(-1, 1)]
            )
        outer_cols = np.hstack([outer_cols, transform(prev_outer).reshape(-1, 1)])
        if test_cols is not None:
            test_cols = np.hstack([test_cols, transform(prev_test).reshape(-1, 1)])

        # outer models: fit on complement features + inner columns, score
        # fold rows with the outer columns
        def outer_fit(j: int):
            rows = comp_idx[j]
            Xtr = np.hstack([values[rows], inner_cols[j]])
            model = fit_gbdt(Xtr, y[rows], params)
            Xva = np.hstack([values[val_idx[j]], outer_cols[val_idx[j]]])
            va_probs = predict_proba(model, Xva)
            te_probs = None
            if test_values is not None:
                te_probs = predict_proba(model, np.hstack([test_values, test_cols]))
            return model, va_probs, te_probs

        if workers > 1:
            with ThreadPoolExecutor(max_workers=min(workers, k)) as pool:
                outer_results = list(pool.map(outer_fit, range(k)))
        else:
            outer_results = [outer_fit(j) for j in range(k)]

        oof_t = np.empty(n, dtype=np.float64)
        test_sum = None
        iter_models: list[GbdtModel] = []
        for j, (model, va_probs, te_probs) in enumerate(outer_results):
            iter_models.append(model)
            oof_t[val_idx[j]] = va_probs
            if te_probs is not None:
                test_sum = te_probs if test_sum is None else test_sum + te_probs
        outer_models.append(iter_models)
        test_t = None if test_sum is None else test_sum / k

        f1_t = f1_score(y, (oof_t >= 0.5).astype(np.int64), averaging)
        trace.append(PseudoIteration(iteration=t, oof_f1=f1_t, feature_width=values.shape[1] + t))
        if f1_t > best_f1:
            best_f1 = f1_t
            best_oof = oof_t
            best_test = test_t
            best_iter = t

        improvement = f1_t - prev_f1
        prev_f1 = f1_t
        prev_outer = oof_t
        prev_test = test_t
        if improvement < epsilon:
            break

    return PseudoResult(
        oof=OofPredictions(probs=best_oof, folds=folds, producer=producer),
        best_iteration=best_iter,
        trace=trace,
        test_probs=best_test,
        pseudo_features=outer_cols,
        outer_models=outer_models,
    )


# ---------------------------------------------------------------------------
# Ensemble weight search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleWeights:
    weights: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        total = sum(w for _, w in self.weights)
        if abs(total - 1.0) > 1e-9:
            raise PipelineError(f"weights sum to {total}, expected 1")
        for name, w in self.weights:
            if w < 0.0:
                raise PipelineError(f"negative weight for {name}")

    def as_dict(self) -> dict[str, float]:
        return dict(self.weights)


def fit_ensemble_weights(
    oof_list: Sequence[OofPredictions],
    y: Sequence[int],
    grid_step: float = 0.05,
    averaging: str = "positive",
) -> EnsembleWeights:
    """Coordinate ascent over the weight simplex in units of grid_step.

    Mass starts on the best single model and moves in integer units between
    model pairs while the 0.5-thresholded blend's F1 strictly improves, so
    the result never falls below the best single model.
    """
    if len(oof_list) == 0:
        raise NoModelsError("no models to blend")
    if not 0.0 < grid_step <= 1.0:
        raise PipelineError("grid_step must be in (0, 1]")
    names = [o.producer for o in oof_list]
    if len(set(names)) != len(names):
        raise ModelMismatchError(f"duplicate producers in {names}")
    y = np.asarray(y, dtype=np.int64)
    n = y.shape[0]
    for o in oof_list:
        if o.probs.shape[0] != n:
            raise ModelMismatchError("prediction lengths differ")

    m = len(oof_list)
    P = np.stack([o.probs for o in oof_list], axis=1)
    M = max(1, round(1.0 / grid_step))

    def blend_f1(masses: np.ndarray) -> float:
        blend = (P * (masses / M)).sum(axis=1)
        return f1_score(y, (blend >= 0.5).astype(np.int64), averaging)

    single = [
        f1_score(y, (P[:, i] >= 0.5).astype(np.int64), averaging) for i in range(m)
    ]
    start = int(np.argmax(single))  # earliest index on ties
    masses = np.zeros(m, dtype=np.int64)
    masses[start] = M
    best = single[start]

    improved = True
    while improved:
        improved = False
        for recv in range(m):
            for donor in range(m):
                if donor == recv or masses[donor] == 0:
                    continue
                best_t = 0
                for t in range(1, int(masses[donor]) + 1):
                    trial = masses.copy()
                    trial[recv] += t
                    trial[donor] -= t
                    f1_t = blend_f1(trial)
                    if f1_t > best:
                        best = f1_t
                        best_t = t
                if best_t:
                    masses[recv] += best_t
                    masses[donor] -= best_t
                    improved = True

    return EnsembleWeights(
        weights=tuple((names[i], masses[i] / M) for i in range(m))
    )


def ensemble_predict(
    weights: EnsembleWeights, preds: Mapping[str, np.ndarray]
) -> np.ndarray:
    """Convex blend of per-producer probability vectors."""
    weight_names = {name for name, _ in weights.weights}
    if weight_names != set(preds):
        raise ModelMismatchError(
            f"weights cover {sorted(weight_names)}, predictions cover {sorted(preds)}"
        )
    lengths = {p.shape[0] for p in preds.values()}
    if len(lengths) > 1:
        raise ModelMismatchError(f"prediction lengths differ: {sorted(lengths)}")
    out = None
    for name, w in weights.weights:
        term = w * np.asarray(preds[name], dtype=np.float64)
        out = term if out is None else out + term
    return out
