"""Multi-stage abusive-comment-detection training pipeline.

Submodules:
    corpus      comment records, CSV I/O, cleaning, transliteration, synthesis
    features    tokenization, tf-idf, embedding files, PCA, metadata, assembly
    gbdt        histogram gradient-boosted trees with logistic loss
    pipeline    stratified folds, out-of-fold stacking, pseudo-labels, ensembling
    evaluation  metrics, threshold tuning, label-noise diagnostics, exports
    plotting    matplotlib figure rendering for the CLI report path
    cli         config parsing and the command-line entry points
"""

__version__ = "0.1.0"
