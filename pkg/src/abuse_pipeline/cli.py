"""Config parsing and command-line entry points.

Subcommands: ingest, train, predict, diagnose, plot, synth. One JSON config
file drives everything; --output-dir and --seed override the config. The
train path writes delimited predictions, a structured run report, a
reloadable model bundle, and rendered PNG figures, all under output_dir.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .corpus import (
    Corpus,
    TRANSLITERATORS,
    clean_corpus,
    compose_model_text,
    load_corpus,
    merge_oversample,
    save_corpus,
    synthesize_corpus,
    transliterate_corpus,
)
from .evaluation import (
    ThresholdMap,
    apply_thresholds,
    compute_metrics,
    f1_score,
    noise_probe,
    pca_scatter_export,
    tune_thresholds,
)
from .features import (
    EmbeddingMatrix,
    FeatureMatrix,
    Vocabulary,
    apply_pca,
    assemble_features,
    embedding_block,
    fit_pca,
    fit_tfidf,
    load_embeddings,
    metadata_block,
    synthesize_embeddings,
    transform_tfidf,
    write_embeddings,
    PcaModel,
)
from .gbdt import GbdtModel, GbdtParams, load_gbdt, predict_proba, save_gbdt
from .pipeline import (
    EnsembleWeights,
    ensemble_predict,
    fit_ensemble_weights,
    make_folds,
    pseudo_label_iteration,
    train_oof,
    train_oof_language_wise,
)
from . import plotting

PARTIAL_MARKER = "RUN.partial"


class ConfigError(ValueError):
    """Base class for configuration failures."""


class ParseError(ConfigError):
    pass


class SchemaError(ConfigError):
    pass


class ConstraintError(ConfigError):
    pass


@dataclass(frozen=True)
class StageToggles:
    clean: bool = True
    transliterate: bool = True
    oversample: bool = False
    tfidf: bool = True
    pca: bool = False
    metadata: bool = True
    language_wise: bool = False
    pseudo: bool = False
    ensemble: bool = True
    thresholds: bool = True


@dataclass(frozen=True)
class SynthSpec:
    n: int
    languages: tuple[tuple[str, float], ...]
    noise_rate: float
    embedding_dim: int = 0
    embedding_separation: float = 4.0


@dataclass(frozen=True)
class RunConfig:
    output_dir: str
    train_path: str | None = None
    test_path: str | None = None
    train_embeddings: str | None = None
    test_embeddings: str | None = None
    model_dir: str | None = None
    flips_path: str | None = None
    seed: int = 0
    max_text_len: int = 150
    tfidf_max_features: int = 500
    pca_components: int = 200
    metadata_transform: str = "log1p"
    transliterator: str = "hindi"
    k: int = 10
    min_language_samples: int = 50
    pseudo_max_iters: int = 3
    pseudo_epsilon: float = 1e-4
    pseudo_hard_labels: bool = False
    pseudo_prior: str = "auto"
    ensemble_grid_step: float = 0.05
    threshold_grid_step: float = 0.01
    threshold_min_count: int = 50
    f1_averaging: str = "positive"
    export_scatter: bool = False
    render_figures: bool = True
    stages: StageToggles = field(default_factory=StageToggles)
    gbdt: GbdtParams = field(default_factory=GbdtParams)
    synth: SynthSpec | None = None


_PATH_KEYS = (
    "train_path", "test_path", "train_embeddings", "test_embeddings",
    "model_dir", "flips_path",
)

_TOP_TYPES = {
    "output_dir": str,
    "train_path": str,
    "test_path": str,
    "train_embeddings": str,
    "test_embeddings": str,
    "model_dir": str,
    "flips_path": str,
    "seed": int,
    "max_text_len": int,
    "tfidf_max_features": int,
    "pca_components": int,
    "metadata_transform": str,
    "transliterator": str,
    "k": int,
    "min_language_samples": int,
    "pseudo_max_iters": int,
    "pseudo_epsilon": float,
    "pseudo_hard_labels": bool,
    "pseudo_prior": str,
    "ensemble_grid_step": float,
    "threshold_grid_step": float,
    "threshold_min_count": int,
    "f1_averaging": str,
    "export_scatter": bool,
    "render_figures": bool,
    "stages": dict,
    "gbdt": dict,
    "synth": dict,
}

_GBDT_TYPES = {
    "num_trees": int,
    "learning_rate": float,
    "max_leaves": int,
    "min_data_in_leaf": int,
    "lambda_l2": float,
    "max_bins": int,
    "seed": int,
}

_SYNTH_TYPES = {
    "n": int,
    "languages": dict,
    "noise_rate": float,
    "embedding_dim": int,
    "embedding_separation": float,
}


def _typed(key: str, value, expected, context: str = "config"):
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{context} key {key!r} must be a number")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"{context} key {key!r} must be an integer")
        return value
    if expected is bool:
        if not isinstance(value, bool):
            raise SchemaError(f"{context} key {key!r} must be a boolean")
        return value
    if expected is str:
        if not isinstance(value, str):
            raise SchemaError(f"{context} key {key!r} must be a string")
        return value
    if expected is dict:
        if not isinstance(value, dict):
            raise SchemaError(f"{context} key {key!r} must be an object")
        return value
    raise AssertionError(f"unhandled schema type {expected}")


def parse_config(path: str) -> RunConfig:
    """Load, type-check, and constraint-check a JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise SchemaError("config root must be a JSON object")

    kwargs: dict = {}
    for key, value in raw.items():
        if key not in _TOP_TYPES:
            raise SchemaError(f"unknown config key {key!r}")
        if value is None:
            continue
        kwargs[key] = _typed(key, value, _TOP_TYPES[key])

    stage_kwargs: dict = {}
    for key, value in kwargs.pop("stages", {}).items():
        if key not in {f.name for f in fields(StageToggles)}:
            raise SchemaError(f"unknown stage key {key!r}")
        stage_kwargs[key] = _typed(key, value, bool, "stages")
    stages = StageToggles(**stage_kwargs)

    gbdt_kwargs: dict = {}
    for key, value in kwargs.pop("gbdt", {}).items():
        if key not in _GBDT_TYPES:
            raise SchemaError(f"unknown gbdt key {key!r}")
        gbdt_kwargs[key] = _typed(key, value, _GBDT_TYPES[key], "gbdt")
    try:
        gbdt = GbdtParams(**gbdt_kwargs)
    except ValueError as exc:
        raise ConstraintError(str(exc))

    synth = None
    if "synth" in kwargs:
        synth_raw = kwargs.pop("synth")
        synth_kwargs: dict = {}
        for key, value in synth_raw.items():
            if key not in _SYNTH_TYPES:
                raise SchemaError(f"unknown synth key {key!r}")
            synth_kwargs[key] = _typed(key, value, _SYNTH_TYPES[key], "synth")
        for required in ("n", "languages", "noise_rate"):
            if required not in synth_kwargs:
                raise SchemaError(f"synth block requires key {required!r}")
        langs = synth_kwargs.pop("languages")
        pairs = []
        for code, prop in langs.items():
            if isinstance(prop, bool) or not isinstance(prop, (int, float)):
                raise SchemaError(f"synth language {code!r} proportion must be a number")
            pairs.append((code, float(prop)))
        synth = SynthSpec(languages=tuple(pairs), **synth_kwargs)

    if "output_dir" not in kwargs:
        raise SchemaError("config requires key 'output_dir'")

    config = RunConfig(stages=stages, gbdt=gbdt, synth=synth, **kwargs)
    _check_constraints(config)
    return config


def _check_constraints(config: RunConfig) -> None:
    if config.max_text_len < 1:
        raise ConstraintError(f"max_text_len must be >= 1, got {config.max_text_len}")
    if config.tfidf_max_features < 1:
        raise ConstraintError("tfidf_max_features must be >= 1")
    if config.pca_components < 1:
        raise ConstraintError("pca_components must be >= 1")
    if config.k < 2:
        raise ConstraintError(f"k must be >= 2, got {config.k}")
    if config.min_language_samples < 1:
        raise ConstraintError("min_language_samples must be >= 1")
    if config.pseudo_max_iters < 1:
        raise ConstraintError("pseudo_max_iters must be >= 1")
    if config.pseudo_epsilon < 0:
        raise ConstraintError("pseudo_epsilon must be >= 0")
    if not 0.0 < config.ensemble_grid_step <= 1.0:
        raise ConstraintError("ensemble_grid_step must be in (0, 1]")
    if not 0.0 < config.threshold_grid_step <= 1.0:
        raise ConstraintError("threshold_grid_step must be in (0, 1]")
    if config.threshold_min_count < 1:
        raise ConstraintError("threshold_min_count must be >= 1")
    if config.metadata_transform not in ("log1p", "raw"):
        raise ConstraintError(
            f"unknown metadata_transform {config.metadata_transform!r}"
        )
    if config.transliterator not in TRANSLITERATORS:
        raise ConstraintError(f"unknown transliterator {config.transliterator!r}")
    if config.f1_averaging not in ("positive", "macro", "weighted"):
        raise ConstraintError(f"unknown f1_averaging {config.f1_averaging!r}")
    if config.pseudo_prior not in ("auto", "pooled", "language_wise"):
        raise ConstraintError(f"unknown pseudo_prior {config.pseudo_prior!r}")
    if config.stages.pca and config.train_embeddings is None:
        raise ConstraintError("pca stage enabled but train_embeddings not set")
    if config.stages.oversample and not config.stages.clean:
        raise ConstraintError("oversample stage requires the clean stage")
    if (
        not config.stages.tfidf
        and not config.stages.metadata
        and config.train_embeddings is None
    ):
        raise ConstraintError("no feature blocks enabled")
    if config.stages.language_wise and config.stages.pca and config.test_path:
        if config.test_embeddings is None:
            raise ConstraintError("test_path with pca requires test_embeddings")
    if config.test_path and config.train_embeddings and config.test_embeddings is None:
        raise ConstraintError("train uses embeddings but test_embeddings not set")
    if config.synth is not None:
        if config.synth.n < 1:
            raise ConstraintError("synth.n must be >= 1")
        if not 0.0 <= config.synth.noise_rate <= 1.0:
            raise ConstraintError("synth.noise_rate must be in [0, 1]")
        if config.synth.embedding_dim < 0:
            raise ConstraintError("synth.embedding_dim must be >= 0")
        total = sum(p for _, p in config.synth.languages)
        if not config.synth.languages or abs(total - 1.0) > 1e-9:
            raise ConstraintError("synth.languages proportions must sum to 1")
    for key in _PATH_KEYS:
        value = getattr(config, key)
        if value is not None and not os.path.exists(value):
            raise ConstraintError(f"{key} does not exist: {value}")


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------


def _preprocess(corpus: Corpus, config: RunConfig) -> Corpus:
    """Apply the clean and transliterate stages to one corpus."""
    if config.stages.clean:
        corpus = clean_corpus(corpus)
    else:
        corpus = corpus.with_records(
            replace(rec, clean_text=rec.raw_text) for rec in corpus.records
        )
    if config.stages.transliterate:
        corpus = transliterate_corpus(corpus, TRANSLITERATORS[config.transliterator])
    return corpus


def _raw_view(corpus: Corpus) -> Corpus:
    """The untouched-text variant used as the oversampling partner."""
    return corpus.with_records(
        replace(rec, clean_text=rec.raw_text, translit_text="")
        for rec in corpus.records
    )


@dataclass
class _Featurized:
    X: FeatureMatrix
    vocab: Vocabulary | None
    pca: PcaModel | None


def _featurize_train(corpus: Corpus, config: RunConfig,
                     embeddings: EmbeddingMatrix | None) -> _Featurized:
    texts = [compose_model_text(rec, config.max_text_len) for rec in corpus.records]
    blocks: list[FeatureMatrix] = []
    vocab = None
    pca_model = None
    if config.stages.tfidf:
        vocab = fit_tfidf(texts, config.tfidf_max_features)
        blocks.append(transform_tfidf(vocab, texts))
    if embeddings is not None:
        if config.stages.pca:
            k = min(config.pca_components, embeddings.n_rows, embeddings.dim)
            pca_model = fit_pca(embeddings, k)
            blocks.append(apply_pca(pca_model, embeddings))
        else:
            blocks.append(embedding_block(embeddings))
    if config.stages.metadata:
        blocks.append(metadata_block(corpus, config.metadata_transform))
    return _Featurized(X=assemble_features(blocks), vocab=vocab, pca=pca_model)


def _featurize_apply(corpus: Corpus, config: RunConfig,
                     embeddings: EmbeddingMatrix | None,
                     vocab: Vocabulary | None,
                     pca_model: PcaModel | None) -> FeatureMatrix:
    texts = [compose_model_text(rec, config.max_text_len) for rec in corpus.records]
    blocks: list[FeatureMatrix] = []
    if vocab is not None:
        blocks.append(transform_tfidf(vocab, texts))
    if embeddings is not None:
        if pca_model is not None:
            blocks.append(apply_pca(pca_model, embeddings))
        else:
            blocks.append(embedding_block(embeddings))
    if config.stages.metadata:
        blocks.append(metadata_block(corpus, config.metadata_transform))
    return assemble_features(blocks)


def _duplicate_embeddings(emb: EmbeddingMatrix) -> EmbeddingMatrix:
    """Oversampling doubles rows; both variants share the record embedding."""
    return EmbeddingMatrix(values=np.vstack([emb.values, emb.values]))


def _write_predictions(path: str, ids: Sequence[str], probs: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "probability"])
        for rid, p in zip(ids, probs):
            writer.writerow([rid, repr(float(p))])


def _write_labels(path: str, ids: Sequence[str], labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"])
        for rid, lab in zip(ids, labels):
            writer.writerow([rid, int(lab)])


def _write_thresholds(path: str, tmap: ThresholdMap) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"global={tmap.global_threshold!r}\n")
        for lang, value in tmap.per_language:
            fh.write(f"{lang}={value!r}\n")


def _read_flips(path: str) -> frozenset[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return frozenset(line.strip() for line in fh if line.strip())


class _Report:
    """Collects structured stage lines for run_report.txt."""

    def __init__(self, seed: int):
        self.lines = [f"seed={seed}"]
        self.stage_f1: list[tuple[str, float]] = []
        self.current = "load"

    def enter(self, name: str) -> None:
        self.current = name

    def stage(self, name: str, status: str, seconds: float, **extras) -> None:
        parts = [f"stage={name}", f"status={status}", f"wall_time_s={seconds:.3f}"]
        for key, value in extras.items():
            parts.append(f"{key}={value}")
        self.lines.append(" ".join(parts))
        if "oof_f1" in extras:
            self.stage_f1.append((name, float(extras["oof_f1"])))

    def write(self, path: str, exit_code: int) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.lines + [f"exit={exit_code}"]) + "\n")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def run(config: RunConfig) -> int:
    """Execute the training pipeline; returns the process exit code."""
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    marker = os.path.join(out, PARTIAL_MARKER)
    with open(marker, "w", encoding="utf-8") as fh:
        fh.write("run in progress\n")
    report = _Report(config.seed)
    try:
        code = _run_train(config, report)
    except Exception as exc:  # noqa: BLE001 - every failure must reach the report
        report.lines.append(
            f"stage={report.current} status=failed error={type(exc).__name__}: {exc}"
        )
        report.write(os.path.join(out, "run_report.txt"), 1)
        print(
            f"error in stage {report.current}: {type(exc).__name__}: {exc}",
            file=sys.stderr,
        )
        return 1
    report.write(os.path.join(out, "run_report.txt"), code)
    if code == 0 and os.path.exists(marker):
        os.remove(marker)
    return code


def _run_train(config: RunConfig, report: _Report) -> int:
    out = config.output_dir
    averaging = config.f1_averaging

    report.enter("load")
    t0 = time.perf_counter()
    if config.train_path is None:
        raise ConstraintError("train requires train_path")
    train = load_corpus(config.train_path, "train")
    test = load_corpus(config.test_path, "test") if config.test_path else None
    report.stage(
        "load", "ok", time.perf_counter() - t0,
        train_rows=len(train), test_rows=0 if test is None else len(test),
    )

    report.enter("clean")
    t0 = time.perf_counter()
    processed = _preprocess(train, config)
    report.stage("clean", "ok" if config.stages.clean else "skipped", time.perf_counter() - t0)

    report.enter("transliterate")
    report.stage("transliterate", "ok" if config.stages.transliterate else "skipped", 0.0)
    test_processed = _preprocess(test, config) if test is not None else None

    report.enter("oversample")
    t0 = time.perf_counter()
    train_emb = None
    if config.train_embeddings:
        train_emb = load_embeddings(config.train_embeddings, len(train))
    if config.stages.oversample:
        processed = merge_oversample(_raw_view(train), processed)
        if train_emb is not None:
            train_emb = _duplicate_embeddings(train_emb)
        report.stage("oversample", "ok", time.perf_counter() - t0, rows=len(processed))
    else:
        report.stage("oversample", "skipped", time.perf_counter() - t0)

    report.enter("featurize")
    t0 = time.perf_counter()
    feat = _featurize_train(processed, config, train_emb)
    X = feat.X
    X_test = None
    if test_processed is not None:
        test_emb = None
        if config.test_embeddings:
            test_emb = load_embeddings(config.test_embeddings, len(test_processed))
        X_test = _featurize_apply(test_processed, config, test_emb, feat.vocab, feat.pca)
    report.stage(
        "featurize", "ok", time.perf_counter() - t0,
        width=X.width, blocks=",".join(f"{k}:{w}" for k, w in X.blocks),
    )

    y = processed.labels()
    langs = processed.languages()
    test_langs = test_processed.languages() if test_processed is not None else None

    report.enter("stack")
    t0 = time.perf_counter()
    folds = make_folds(y, langs, config.k, config.seed)
    pooled = train_oof(X, y, folds, config.gbdt, X_test, producer="pooled")
    pooled_f1 = f1_score(y, (pooled.oof.probs >= 0.5).astype(np.int64), averaging)
    members = {"pooled": (pooled.oof, pooled.test_probs)}
    extras = {"oof_f1": f"{pooled_f1:.6f}"}
    lw = None
    if config.stages.language_wise:
        lw = train_oof_language_wise(
            langs, X, y, folds, config.gbdt, config.min_language_samples,
            pooled, X_test, test_langs,
        )
        lw_f1 = f1_score(y, (lw.oof.probs >= 0.5).astype(np.int64), averaging)
        members["language_wise"] = (lw.oof, lw.test_probs)
        extras["language_wise_oof_f1"] = f"{lw_f1:.6f}"
        extras["fallback_languages"] = ",".join(lw.fallback_languages) or "-"
    report.stage("stack", "ok", time.perf_counter() - t0, **extras)

    report.enter("pseudo")
    pseudo = None
    t0 = time.perf_counter()
    if config.stages.pseudo:
        prior_name = config.pseudo_prior
        if prior_name == "auto":
            prior_name = "language_wise" if lw is not None else "pooled"
        if prior_name == "language_wise" and lw is None:
            raise ConstraintError("pseudo_prior language_wise requires the language_wise stage")
        prior_oof, prior_test = members[prior_name]
        pseudo = pseudo_label_iteration(
            X, y, folds, prior_oof, config.gbdt,
            max_iters=config.pseudo_max_iters,
            epsilon=config.pseudo_epsilon,
            X_test=X_test,
            prior_test=prior_test,
            hard_labels=config.pseudo_hard_labels,
            averaging=averaging,
        )
        members["pseudo"] = (pseudo.oof, pseudo.test_probs)
        report.stage(
            "pseudo", "ok", time.perf_counter() - t0,
            oof_f1=f"{max(it.oof_f1 for it in pseudo.trace):.6f}",
            iterations=len(pseudo.trace),
            best_iteration=pseudo.best_iteration,
            prior=prior_name,
        )
    else:
        report.stage("pseudo", "skipped", time.perf_counter() - t0)

    report.enter("ensemble")
    t0 = time.perf_counter()
    member_names = list(members)
    if config.stages.ensemble and len(member_names) > 1:
        weights = fit_ensemble_weights(
            [members[name][0] for name in member_names], y,
            config.ensemble_grid_step, averaging,
        )
    else:
        # final output = last stage in the fixed order
        weights = EnsembleWeights(
            weights=tuple(
                (name, 1.0 if name == member_names[-1] else 0.0)
                for name in member_names
            )
        )
    final_oof = ensemble_predict(
        weights, {name: members[name][0].probs for name in member_names}
    )
    final_test = None
    if X_test is not None:
        final_test = ensemble_predict(
            weights, {name: members[name][1] for name in member_names}
        )
    blend_f1 = f1_score(y, (final_oof >= 0.5).astype(np.int64), averaging)
    report.stage(
        "ensemble",
        "ok" if config.stages.ensemble else "skipped",
        time.perf_counter() - t0,
        oof_f1=f"{blend_f1:.6f}",
        weights=",".join(f"{n}:{w:g}" for n, w in weights.weights),
    )

    report.enter("thresholds")
    t0 = time.perf_counter()
    if config.stages.thresholds:
        tmap = tune_thresholds(
            final_oof, y, langs,
            config.threshold_grid_step, config.threshold_min_count,
        )
    else:
        tmap = ThresholdMap()
    train_labels = apply_thresholds(final_oof, langs, tmap)
    tuned_f1 = f1_score(y, train_labels, averaging)
    report.stage(
        "thresholds",
        "ok" if config.stages.thresholds else "skipped",
        time.perf_counter() - t0,
        oof_f1=f"{tuned_f1:.6f}",
        global_threshold=f"{tmap.global_threshold:g}",
    )

    # ------------------------------------------------------------------ report
    report.enter("report")
    t0 = time.perf_counter()
    ids = processed.ids()
    _write_predictions(os.path.join(out, "oof_predictions.csv"), ids, final_oof)
    _write_labels(os.path.join(out, "oof_labels.csv"), ids, train_labels)
    _write_thresholds(os.path.join(out, "thresholds.txt"), tmap)
    metrics = compute_metrics(y, train_labels)
    with open(os.path.join(out, "metrics.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics.to_text())
    if test_processed is not None and final_test is not None:
        test_ids = test_processed.ids()
        _write_predictions(os.path.join(out, "test_predictions.csv"), test_ids, final_test)
        _write_labels(
            os.path.join(out, "test_labels.csv"), test_ids,
            apply_thresholds(final_test, test_langs, tmap),
        )

    _save_bundle(os.path.join(out, "bundle"), config, feat, members, pooled, lw, pseudo, weights, tmap)

    if config.export_scatter and train_emb is not None:
        flips = _read_flips(config.flips_path) if config.flips_path else None
        flagged = None
        if flips is not None:
            flagged = [rid.split("#")[0] in flips for rid in ids]
        pca_scatter_export(
            train_emb, y, os.path.join(out, "scatter.tsv"), flagged,
        )
    if config.render_figures:
        figdir = os.path.join(out, "figures")
        os.makedirs(figdir, exist_ok=True)
        stage_scores = report.stage_f1 + [("thresholds_final", tuned_f1)]
        plotting.render_stage_f1(stage_scores, os.path.join(figdir, "stage_f1.png"))
        plotting.render_loss_curves(
            [("pooled fold 0", pooled.models[0].loss_curve)],
            os.path.join(figdir, "loss_curve.png"),
        )
        if train_emb is not None:
            model2 = fit_pca(train_emb, 2)
            proj = apply_pca(model2, train_emb).values
            flips = _read_flips(config.flips_path) if config.flips_path else None
            flagged = None
            if flips is not None:
                flagged = [rid.split("#")[0] in flips for rid in ids]
            plotting.render_scatter(proj, y, os.path.join(figdir, "scatter_labels.png"))
            if flagged is not None:
                plotting.render_scatter(
                    proj, y, os.path.join(figdir, "scatter_flips.png"), flagged,
                )
    report.stage("report", "ok", time.perf_counter() - t0)
    return 0


# ---------------------------------------------------------------------------
# Model bundle: everything predict needs, as text + JSON manifest
# ---------------------------------------------------------------------------


def _save_vocab(vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(
            {
                "terms": list(vocab.terms),
                "doc_freq": list(vocab.doc_freq),
                "n_docs": vocab.n_docs,
            },
            fh,
            ensure_ascii=False,
        )


def _load_vocab(path: str) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return Vocabulary(
        terms=tuple(raw["terms"]),
        doc_freq=tuple(raw["doc_freq"]),
        n_docs=raw["n_docs"],
    )


def _save_pca(model: PcaModel, path: str) -> None:
    lines = [f"pca {model.k} {model.dim}"]
    lines.append("mean " + " ".join(repr(float(v)) for v in model.mean))
    for row in model.components:
        lines.append("component " + " ".join(repr(float(v)) for v in row))
    lines.append(
        "explained " + " ".join(repr(float(v)) for v in model.explained_variance)
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_pca(path: str) -> PcaModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split()
    k, dim = int(header[1]), int(header[2])
    mean = np.array([float(v) for v in lines[1].split()[1:]])
    components = np.array(
        [[float(v) for v in lines[2 + i].split()[1:]] for i in range(k)]
    )
    explained = np.array([float(v) for v in lines[2 + k].split()[1:]])
    if mean.shape[0] != dim or components.shape != (k, dim):
        raise ParseError(f"{path}: inconsistent pca dimensions")
    return PcaModel(mean=mean, components=components, explained_variance=explained)


def _save_bundle(bundle_dir, config, feat, members, pooled, lw, pseudo, weights, tmap) -> None:
    os.makedirs(os.path.join(bundle_dir, "models"), exist_ok=True)
    manifest = {
        "format": "abuse-pipeline-bundle v1",
        "stages": {f.name: getattr(config.stages, f.name) for f in fields(StageToggles)},
        "max_text_len": config.max_text_len,
        "metadata_transform": config.metadata_transform,
        "transliterator": config.transliterator,
        "k": config.k,
        "members": list(members),
        "weights": {name: w for name, w in weights.weights},
        "thresholds": {
            "global": tmap.global_threshold,
            "per_language": {lang: v for lang, v in tmap.per_language},
        },
        "language_wise_languages": sorted(lw.models) if lw is not None else [],
        "pseudo": None,
    }
    if feat.vocab is not None:
        _save_vocab(feat.vocab, os.path.join(bundle_dir, "vocab.json"))
        manifest["vocab"] = "vocab.json"
    if feat.pca is not None:
        _save_pca(feat.pca, os.path.join(bundle_dir, "pca.txt"))
        manifest["pca"] = "pca.txt"
    for j, model in enumerate(pooled.models):
        save_gbdt(model, os.path.join(bundle_dir, "models", f"pooled_f{j}.txt"))
    if lw is not None:
        for lang, lang_models in lw.models.items():
            for j, model in enumerate(lang_models):
                save_gbdt(
                    model,
                    os.path.join(bundle_dir, "models", f"lang_{lang}_f{j}.txt"),
                )
    if pseudo is not None:
        manifest["pseudo"] = {
            "best_iteration": pseudo.best_iteration,
            "hard_labels": config.pseudo_hard_labels,
            "prior": (
                "language_wise"
                if config.pseudo_prior == "auto" and lw is not None
                else ("pooled" if config.pseudo_prior == "auto" else config.pseudo_prior)
            ),
        }
        # prediction on new data only needs the chain of outer models up to
        # the best iteration
        for t, fold_models in enumerate(
            pseudo.outer_models[: pseudo.best_iteration], start=1
        ):
            for j, model in enumerate(fold_models):
                save_gbdt(
                    model,
                    os.path.join(bundle_dir, "models", f"pseudo_i{t}_f{j}.txt"),
                )
    with open(os.path.join(bundle_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, ensure_ascii=False)


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def run_predict(config: RunConfig) -> int:
    if config.model_dir is None:
        raise ConstraintError("predict requires model_dir")
    if config.test_path is None:
        raise ConstraintError("predict requires test_path")
    out = config.output_dir
    os.makedirs(out, exist_ok=True)

    with open(os.path.join(config.model_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    stages = StageToggles(**manifest["stages"])
    config = replace(
        config,
        stages=stages,
        max_text_len=manifest["max_text_len"],
        metadata_transform=manifest["metadata_transform"],
        transliterator=manifest["transliterator"],
    )
    k = manifest["k"]

    test = load_corpus(config.test_path, "test")
    processed = _preprocess(test, config)
    emb = None
    if config.test_embeddings:
        emb = load_embeddings(config.test_embeddings, len(test))
    vocab = (
        _load_vocab(os.path.join(config.model_dir, manifest["vocab"]))
        if "vocab" in manifest
        else None
    )
    pca_model = (
        _load_pca(os.path.join(config.model_dir, manifest["pca"]))
        if "pca" in manifest
        else None
    )
    X = _featurize_apply(processed, config, emb, vocab, pca_model)

    model_dir = os.path.join(config.model_dir, "models")

    def mean_over(models: list[GbdtModel], values) -> np.ndarray:
        total = None
        for model in models:
            p = predict_proba(model, values)
            total = p if total is None else total + p
        return total / len(models)

    member_preds: dict[str, np.ndarray] = {}
    pooled_models = [
        load_gbdt(os.path.join(model_dir, f"pooled_f{j}.txt")) for j in range(k)
    ]
    member_preds["pooled"] = mean_over(pooled_models, X.values)

    if "language_wise" in manifest["members"]:
        lw_preds = member_preds["pooled"].copy()
        langs_arr = np.asarray(processed.languages())
        for lang in manifest["language_wise_languages"]:
            idx = np.nonzero(langs_arr == lang)[0]
            if idx.shape[0] == 0:
                continue
            models = [
                load_gbdt(os.path.join(model_dir, f"lang_{lang}_f{j}.txt"))
                for j in range(k)
            ]
            lw_preds[idx] = mean_over(models, X.values[idx])
        member_preds["language_wise"] = lw_preds

    if manifest.get("pseudo"):
        spec = manifest["pseudo"]
        prior = member_preds[spec["prior"]]
        cols = np.empty((X.n_rows, 0))
        current = prior
        for t in range(1, spec["best_iteration"] + 1):
            col = (current >= 0.5).astype(np.float64) if spec["hard_labels"] else current
            cols = np.hstack([cols, col.reshape(-1, 1)])
            models = [
                load_gbdt(os.path.join(model_dir, f"pseudo_i{t}_f{j}.txt"))
                for j in range(k)
            ]
            current = mean_over(models, np.hstack([X.values, cols]))
        member_preds["pseudo"] = current

    weights = EnsembleWeights(
        weights=tuple((name, float(w)) for name, w in manifest["weights"].items())
    )
    final = ensemble_predict(weights, {n: member_preds[n] for n in manifest["members"]})
    tmap = ThresholdMap(
        global_threshold=manifest["thresholds"]["global"],
        per_language=tuple(sorted(manifest["thresholds"]["per_language"].items())),
    )
    ids = processed.ids()
    _write_predictions(os.path.join(out, "test_predictions.csv"), ids, final)
    _write_labels(
        os.path.join(out, "test_labels.csv"), ids,
        apply_thresholds(final, processed.languages(), tmap),
    )
    print(f"wrote predictions for {len(ids)} records to {out}")
    return 0


# ---------------------------------------------------------------------------
# ingest / diagnose / plot / synth
# ---------------------------------------------------------------------------


def run_ingest(config: RunConfig) -> int:
    if config.train_path is None:
        raise ConstraintError("ingest requires train_path")
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    for split, path in (("train", config.train_path), ("test", config.test_path)):
        if path is None:
            continue
        corpus = load_corpus(path, split)
        processed = _preprocess(corpus, config)
        composed = processed.with_records(
            replace(rec, raw_text=compose_model_text(rec, config.max_text_len))
            for rec in processed.records
        )
        save_corpus(composed, os.path.join(out, f"{split}_ingested.csv"))
        print(f"{split}: {len(corpus)} records ingested")
    return 0


def run_diagnose(config: RunConfig) -> int:
    if config.train_path is None:
        raise ConstraintError("diagnose requires train_path")
    out = config.output_dir
    os.makedirs(out, exist_ok=True)

    train = load_corpus(config.train_path, "train")
    processed = _preprocess(train, config)
    emb = None
    if config.train_embeddings:
        emb = load_embeddings(config.train_embeddings, len(train))
    feat = _featurize_train(processed, config, emb)
    y = processed.labels()
    langs = processed.languages()
    folds = make_folds(y, langs, config.k, config.seed)
    pooled = train_oof(feat.X, y, folds, config.gbdt)
    if config.stages.thresholds:
        tmap = tune_thresholds(
            pooled.oof.probs, y, langs,
            config.threshold_grid_step, config.threshold_min_count,
        )
    else:
        tmap = ThresholdMap()
    flips = _read_flips(config.flips_path) if config.flips_path else None
    report = noise_probe(
        processed, feat.X, pooled.oof, tmap, config.gbdt, config.seed, flips,
    )
    with open(os.path.join(out, "noise_report.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_text())
    # probe predictions get their own file; a train run's artifacts in the
    # same output_dir must survive a later diagnose untouched
    _write_predictions(
        os.path.join(out, "probe_oof_predictions.csv"), processed.ids(), pooled.oof.probs
    )
    print(report.to_text(), end="")
    return 0


def run_plot(config: RunConfig) -> int:
    if config.train_path is None:
        raise ConstraintError("plot requires train_path")
    if config.train_embeddings is None:
        raise ConstraintError("plot requires train_embeddings")
    out = config.output_dir
    os.makedirs(out, exist_ok=True)

    train = load_corpus(config.train_path, "train")
    emb = load_embeddings(config.train_embeddings, len(train))
    y = train.labels()
    flips = _read_flips(config.flips_path) if config.flips_path else None
    flagged = None
    if flips is not None:
        flagged = [rid in flips for rid in train.ids()]
    pca_scatter_export(emb, y, os.path.join(out, "scatter.tsv"), flagged)
    model2 = fit_pca(emb, 2)
    proj = apply_pca(model2, emb).values
    plotting.render_scatter(proj, y, os.path.join(out, "scatter_labels.png"))
    if flagged is not None:
        plotting.render_scatter(proj, y, os.path.join(out, "scatter_flips.png"), flagged)
    print(f"wrote scatter export and figures to {out}")
    return 0


def run_synth(config: RunConfig) -> int:
    if config.synth is None:
        raise ConstraintError("synth requires a synth config block")
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    spec = config.synth
    corpus, flips = synthesize_corpus(
        spec.n, list(spec.languages), spec.noise_rate, config.seed
    )
    save_corpus(corpus, os.path.join(out, "corpus.csv"))
    with open(os.path.join(out, "flips.txt"), "w", encoding="utf-8", newline="\n") as fh:
        for rid in sorted(flips):
            fh.write(rid + "\n")
    if spec.embedding_dim > 0:
        values = synthesize_embeddings(
            corpus, spec.embedding_dim, config.seed, spec.embedding_separation
        )
        write_embeddings(values, os.path.join(out, "embeddings.emb"))
    print(
        f"synthesized {spec.n} records, {len(flips)} flipped, "
        f"languages {','.join(code for code, _ in spec.languages)}"
    )
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


_SUBCOMMANDS = {
    "ingest": run_ingest,
    "train": run,
    "predict": run_predict,
    "diagnose": run_diagnose,
    "plot": run_plot,
    "synth": run_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="abuse-pipeline",
        description="multi-stage abusive comment detection pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--output-dir", default=None, help="override output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
    args = parser.parse_args(argv)

    try:
        config = parse_config(args.config)
        if args.output_dir is not None:
            config = replace(config, output_dir=args.output_dir)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
            config = replace(config, gbdt=replace(config.gbdt, seed=args.seed))
        return _SUBCOMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
