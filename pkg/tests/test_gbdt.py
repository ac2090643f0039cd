"""Histogram gradient-boosted trees: numerics, symmetry, and serialization."""

import math

import numpy as np
import pytest

from abuse_pipeline.gbdt import (
    DimMismatchError,
    EmptyTrainingSetError,
    GbdtError,
    GbdtParams,
    LabelOutOfRangeError,
    ModelFormatError,
    fit_bins,
    fit_gbdt,
    load_gbdt,
    logistic_grad,
    logistic_hess,
    logistic_loss,
    predict_margin,
    predict_proba,
    save_gbdt,
    sigmoid,
)


def make_data(n=300, d=8, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = (X[:, 0] + 0.5 * X[:, 1] + 0.1 * rng.standard_normal(n) > 0).astype(np.int64)
    return X, y


# ---------------------------------------------------------------------------
# params and loss pieces
# ---------------------------------------------------------------------------

def test_params_validation():
    with pytest.raises(GbdtError):
        GbdtParams(num_trees=0)
    with pytest.raises(GbdtError):
        GbdtParams(learning_rate=0.0)
    with pytest.raises(GbdtError):
        GbdtParams(max_leaves=1)
    with pytest.raises(GbdtError):
        GbdtParams(min_data_in_leaf=0)
    with pytest.raises(GbdtError):
        GbdtParams(lambda_l2=-0.1)
    with pytest.raises(GbdtError):
        GbdtParams(max_bins=1)
    with pytest.raises(GbdtError):
        GbdtParams(max_bins=256)


def test_sigmoid_stable_at_extremes():
    assert sigmoid(np.array([800.0]))[0] == 1.0
    assert sigmoid(np.array([-800.0]))[0] == 0.0
    assert sigmoid(np.array([0.0]))[0] == 0.5


def test_gradient_hessian_finite_differences():
    rng = np.random.default_rng(42)
    z = rng.uniform(-6.0, 6.0, 1000)
    y = rng.integers(0, 2, 1000).astype(np.float64)
    g = logistic_grad(z, y)
    h = logistic_hess(z, y)
    eps_g, eps_h = 1e-5, 1e-4
    num_g = (logistic_loss(z + eps_g, y) - logistic_loss(z - eps_g, y)) / (2 * eps_g)
    num_h = (
        logistic_loss(z + eps_h, y) - 2 * logistic_loss(z, y) + logistic_loss(z - eps_h, y)
    ) / eps_h**2
    assert np.max(np.abs(g - num_g)) <= 1e-6
    assert np.max(np.abs(h - num_h)) <= 1e-6


def test_gradient_hessian_label_antisymmetry():
    rng = np.random.default_rng(1)
    z = rng.uniform(-8.0, 8.0, 500)
    y = rng.integers(0, 2, 500).astype(np.float64)
    # flipping the label and negating the margin negates the gradient exactly
    assert np.array_equal(logistic_grad(-z, 1.0 - y), -logistic_grad(z, y))
    assert np.array_equal(logistic_hess(-z, 1.0 - y), logistic_hess(z, y))


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------

def test_bins_few_distinct_values_bijective():
    x = np.array([[3.0], [1.0], [2.0], [1.0], [3.0]])
    mapper = fit_bins(x, max_bins=255)
    b = mapper.bin_matrix(x).ravel()
    assert b.tolist() == [2, 0, 1, 0, 2]


def test_bins_constant_feature_single_bin():
    x = np.full((10, 1), 7.5)
    mapper = fit_bins(x, max_bins=255)
    assert np.all(mapper.bin_matrix(x) == 0)


def test_bins_uniform_quartiles():
    rng = np.random.default_rng(2)
    x = rng.random((1000, 1))
    mapper = fit_bins(x, max_bins=4)
    counts = np.bincount(mapper.bin_matrix(x).ravel(), minlength=4)
    assert counts.min() >= 249 and counts.max() <= 251


def test_bins_monotone():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((500, 1))
    mapper = fit_bins(x, max_bins=16)
    order = np.argsort(x.ravel())
    b = mapper.bin_matrix(x).ravel()[order]
    assert np.all(np.diff(b) >= 0)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def test_fit_rejects_bad_inputs():
    X, y = make_data(50)
    with pytest.raises(EmptyTrainingSetError):
        fit_gbdt(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), GbdtParams())
    with pytest.raises(LabelOutOfRangeError):
        fit_gbdt(X, y + 1, GbdtParams())
    with pytest.raises(DimMismatchError):
        fit_gbdt(X, y[:-1], GbdtParams())


def test_constant_labels_no_splits():
    X, _ = make_data(60)
    model = fit_gbdt(X, np.ones(60, dtype=np.int64), GbdtParams(num_trees=5))
    expected = math.log(1.0 - 1e-15) - math.log(1e-15)
    assert abs(model.base_score - expected) <= 1e-9
    for tree in model.trees:
        assert len(tree.value) == 1 and tree.is_leaf[0]


def test_separable_1d_perfect_train_accuracy():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, (200, 1))
    y = (X[:, 0] >= 0).astype(np.int64)
    model = fit_gbdt(X, y, GbdtParams(num_trees=20, min_data_in_leaf=5))
    pred = (predict_proba(model, X) >= 0.5).astype(np.int64)
    assert np.array_equal(pred, y)


def test_training_loss_monotone():
    for seed in (0, 1, 2):
        X, y = make_data(400, 10, seed=seed)
        model = fit_gbdt(X, y, GbdtParams(num_trees=60))
        curve = np.asarray(model.loss_curve)
        # entry 0 is the base-score loss, then one entry per boosting round
        assert curve.shape[0] == 61
        assert np.all(np.diff(curve) <= 1e-12), seed


def test_single_stump_hand_oracle():
    # 100 clean negatives at x=-1, 100 positives at x=+1; one stump splits them
    X = np.concatenate([np.full(100, -1.0), np.full(100, 1.0)]).reshape(-1, 1)
    y = np.concatenate([np.zeros(100), np.ones(100)]).astype(np.int64)
    params = GbdtParams(num_trees=1, max_leaves=2, min_data_in_leaf=20, lambda_l2=1.0)
    model = fit_gbdt(X, y, params)
    # base = logit(0.5) = 0, so p0 = 0.5: G_left = 50, H_left = 25 per side
    v = 50.0 / 26.0
    probs = predict_proba(model, X)
    assert abs(model.base_score) <= 1e-12
    expect_neg = 1.0 / (1.0 + math.exp(0.1 * v))
    expect_pos = 1.0 / (1.0 + math.exp(-0.1 * v))
    assert np.max(np.abs(probs[:100] - expect_neg)) <= 1e-12
    assert np.max(np.abs(probs[100:] - expect_pos)) <= 1e-12


def test_predict_zero_tree_model_is_base_rate():
    X, y = make_data(80)
    model = fit_gbdt(X, y, GbdtParams(num_trees=1))
    stripped = type(model)(
        params=model.params, base_score=model.base_score, mapper=model.mapper,
        trees=(), n_features=model.n_features, loss_curve=(),
    )
    p = predict_proba(stripped, X)
    assert np.allclose(p, sigmoid(np.array([model.base_score]))[0])


def test_predict_range_and_dim_check():
    X, y = make_data(150)
    model = fit_gbdt(X, y, GbdtParams(num_trees=30))
    p = predict_proba(model, X)
    assert np.all(p > 0.0) and np.all(p < 1.0)
    with pytest.raises(DimMismatchError):
        predict_proba(model, X[:, :-1])


# ---------------------------------------------------------------------------
# label-flip symmetry (the mechanism behind the flipped-training experiment)
# ---------------------------------------------------------------------------

def test_label_flip_symmetry_exact():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((500, 20))
    y = (X[:, :3].sum(axis=1) > 0).astype(np.int64)
    params = GbdtParams(num_trees=40)
    m1 = fit_gbdt(X, y, params)
    m2 = fit_gbdt(X, 1 - y, params)
    assert m2.base_score == -m1.base_score
    assert len(m1.trees) == len(m2.trees)
    for t1, t2 in zip(m1.trees, m2.trees):
        assert np.array_equal(t1.feature, t2.feature)
        assert np.array_equal(t1.threshold, t2.threshold)
        assert np.array_equal(t1.left, t2.left)
        assert np.array_equal(t1.right, t2.right)
        assert np.array_equal(t1.value[t1.is_leaf], -t2.value[t2.is_leaf])
    Xt = rng.standard_normal((200, 20))
    assert np.array_equal(predict_margin(m2, Xt), -predict_margin(m1, Xt))
    assert np.max(np.abs(predict_proba(m1, Xt) + predict_proba(m2, Xt) - 1.0)) <= 1e-12


# ---------------------------------------------------------------------------
# binning consistency and determinism
# ---------------------------------------------------------------------------

def test_within_bin_perturbation_never_changes_predictions():
    rng = np.random.default_rng(8)
    X, y = make_data(300, 5, seed=8)
    model = fit_gbdt(X, y, GbdtParams(num_trees=25, max_bins=16))
    base = predict_proba(model, X)
    binned = model.mapper.bin_matrix(X)
    # nudge each value toward its bin's interior; bins must absorb the change
    X2 = X.copy()
    for f in range(X.shape[1]):
        edges = np.asarray(model.mapper.edges[f])
        lo = np.where(binned[:, f] == 0, -np.inf, edges[np.maximum(binned[:, f].astype(int) - 1, 0)])
        hi = np.where(binned[:, f] >= len(edges), np.inf, edges[np.minimum(binned[:, f].astype(int), len(edges) - 1)])
        mid_ok = np.isfinite(lo) & np.isfinite(hi)
        X2[mid_ok, f] = (lo[mid_ok] + hi[mid_ok]) / 2.0
    assert np.array_equal(model.mapper.bin_matrix(X2), binned)
    assert np.array_equal(predict_proba(model, X2), base)


def test_fit_deterministic():
    X, y = make_data(250, 6, seed=9)
    a = fit_gbdt(X, y, GbdtParams(num_trees=15))
    b = fit_gbdt(X, y, GbdtParams(num_trees=15))
    assert np.array_equal(predict_margin(a, X), predict_margin(b, X))
    assert a.base_score == b.base_score


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_save_load_roundtrip_exact(tmp_path):
    X, y = make_data(200, 7, seed=10)
    model = fit_gbdt(X, y, GbdtParams(num_trees=25))
    path = str(tmp_path / "model.txt")
    save_gbdt(model, path)
    loaded = load_gbdt(path)
    Xt = np.random.default_rng(11).standard_normal((100, 7))
    assert np.array_equal(predict_proba(model, Xt), predict_proba(loaded, Xt))
    assert loaded.base_score == model.base_score
    assert loaded.params == model.params


def test_load_rejects_malformed(tmp_path):
    path = tmp_path / "junk.txt"
    path.write_text("not a model\n", encoding="utf-8")
    with pytest.raises(ModelFormatError):
        load_gbdt(str(path))
