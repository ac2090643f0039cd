"""Histogram gradient-boosted decision trees with binary logistic loss.

Features are quantized once into at most max_bins integer bins per feature;
trees grow leaf-wise (best-first) on gradient/hessian histograms with the
parent-minus-sibling subtraction trick. All accumulation runs in a fixed
order, so training is bit-deterministic, and the gradient/hessian/base-score
expressions are written to be exactly antisymmetric under label flips:
fitting on 1-y yields the same tree structures with negated leaf values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import FeatureMatrix

PROB_EPS = 1e-15


class GbdtError(ValueError):
    """Base class for training and prediction failures."""


class EmptyTrainingSetError(GbdtError):
    pass


class LabelOutOfRangeError(GbdtError):
    pass


class DimMismatchError(GbdtError):
    pass


class ModelFormatError(GbdtError):
    pass


@dataclass(frozen=True)
class GbdtParams:
    num_trees: int = 100
    learning_rate: float = 0.1
    max_leaves: int = 31
    min_data_in_leaf: int = 20
    lambda_l2: float = 1.0
    max_bins: int = 255
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_trees < 1:
            raise GbdtError(f"num_trees must be >= 1, got {self.num_trees}")
        if not self.learning_rate > 0.0:
            raise GbdtError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_leaves < 2:
            raise GbdtError(f"max_leaves must be >= 2, got {self.max_leaves}")
        if self.min_data_in_leaf < 1:
            raise GbdtError(f"min_data_in_leaf must be >= 1, got {self.min_data_in_leaf}")
        if self.lambda_l2 < 0.0:
            raise GbdtError(f"lambda_l2 must be >= 0, got {self.lambda_l2}")
        if not 2 <= self.max_bins <= 255:
            raise GbdtError(f"max_bins must be in [2, 255], got {self.max_bins}")


# ---------------------------------------------------------------------------
# Logistic loss pieces. Written so that negating the margin and flipping the
# label negates the gradient exactly and leaves the hessian bit-identical.
# ---------------------------------------------------------------------------


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_loss(margin: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample negative log likelihood of the label under sigmoid(margin)."""
    margin = np.asarray(margin, dtype=np.float64)
    y = np.asarray(y)
    return np.logaddexp(0.0, -margin) + (1.0 - y) * margin


def logistic_grad(margin: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d loss / d margin = sigmoid(margin) - y, in an exactly antisymmetric form."""
    margin = np.asarray(margin, dtype=np.float64)
    y = np.asarray(y)
    return np.where(y == 0, sigmoid(margin), -sigmoid(-margin))


def logistic_hess(margin: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d2 loss / d margin2 = p(1-p), label-free and flip-invariant."""
    margin = np.asarray(margin, dtype=np.float64)
    return sigmoid(margin) * sigmoid(-margin)


def _base_score(y: np.ndarray) -> float:
    n = y.shape[0]
    pos = float(np.count_nonzero(y)) / n
    neg = float(np.count_nonzero(y == 0)) / n
    pos = min(max(pos, PROB_EPS), 1.0 - PROB_EPS)
    neg = min(max(neg, PROB_EPS), 1.0 - PROB_EPS)
    return float(np.log(pos) - np.log(neg))


# ---------------------------------------------------------------------------
# Binning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinMapper:
    """Per-feature upper-inclusive bin edges: bin(x) = #edges strictly below x."""

    edges: tuple[np.ndarray, ...]

    @property
    def n_features(self) -> int:
        return len(self.edges)

    def n_bins(self) -> np.ndarray:
        return np.array([e.shape[0] + 1 for e in self.edges], dtype=np.int64)

    def bin_column(self, col: np.ndarray, f: int) -> np.ndarray:
        return np.searchsorted(self.edges[f], col, side="left")

    def bin_matrix(self, X: np.ndarray) -> np.ndarray:
        n, F = X.shape
        out = np.empty((n, F), dtype=np.uint8)
        for f in range(F):
            out[:, f] = self.bin_column(X[:, f], f)
        return out


def fit_bins(X: np.ndarray, max_bins: int) -> BinMapper:
    """Quantile-style edges over each feature's distinct values.

    Features with at most max_bins distinct values get one bin per value
    (midpoint edges), so the mapping is bijective and order-preserving.
    """
    edges: list[np.ndarray] = []
    for f in range(X.shape[1]):
        u = np.unique(X[:, f])
        if u.shape[0] <= 1:
            edges.append(np.empty(0, dtype=np.float64))
        elif u.shape[0] <= max_bins:
            edges.append((u[:-1] + u[1:]) / 2.0)
        else:
            cuts = np.round(np.arange(1, max_bins) * (u.shape[0] / max_bins)).astype(np.int64)
            edges.append((u[cuts - 1] + u[cuts]) / 2.0)
    return BinMapper(edges=tuple(edges))


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


@dataclass
class Tree:
    """Flat node arrays; node 0 is the root, leaves carry the output value."""

    feature: np.ndarray    # int32, -1 for leaves
    threshold: np.ndarray  # int32 bin index; go left when bin <= threshold
    left: np.ndarray       # int32 child ids, -1 for leaves
    right: np.ndarray
    value: np.ndarray      # float64, zero for internal nodes
    is_leaf: np.ndarray    # bool

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.is_leaf))

    def predict_binned(self, binned: np.ndarray) -> np.ndarray:
        n = binned.shape[0]
        cur = np.zeros(n, dtype=np.int32)
        while True:
            active = np.nonzero(~self.is_leaf[cur])[0]
            if active.shape[0] == 0:
                break
            nodes = cur[active]
            feats = self.feature[nodes]
            go_left = binned[active, feats] <= self.threshold[nodes]
            cur[active] = np.where(go_left, self.left[nodes], self.right[nodes])
        return self.value[cur]


@dataclass
class GbdtModel:
    params: GbdtParams
    base_score: float
    mapper: BinMapper
    trees: list[Tree]
    n_features: int
    loss_curve: list[float] = field(default_factory=list)


class _LeafState:
    """Bookkeeping for a growable leaf: rows, stats, histogram, best split."""

    __slots__ = ("idx", "grad", "hess", "hist_g", "hist_h", "hist_c",
                 "gain", "flat_bin", "node_id")

    def __init__(self, idx, grad, hess, hist_g, hist_h, hist_c, node_id):
        self.idx = idx
        self.grad = grad
        self.hess = hess
        self.hist_g = hist_g
        self.hist_h = hist_h
        self.hist_c = hist_c
        self.node_id = node_id
        self.gain = -np.inf
        self.flat_bin = -1


class _TreeGrower:
    """Grows one tree leaf-wise over precomputed flat bin codes."""

    def __init__(self, codes: np.ndarray, offsets: np.ndarray, n_bins: np.ndarray,
                 params: GbdtParams):
        self.codes = codes              # (n, F) int32, feature-offset bin codes
        self.offsets = offsets          # (F,) int64 flat start per feature
        self.n_bins = n_bins
        self.params = params
        self.total_bins = int(n_bins.sum())
        self.n_features = codes.shape[1]
        # A split at a feature's last bin sends every row left; never valid.
        mask = np.ones(self.total_bins, dtype=bool)
        mask[np.cumsum(n_bins) - 1] = False
        self.candidate_mask = mask
        self.feat_of_flat = np.repeat(
            np.arange(self.n_features, dtype=np.int64), n_bins
        )
        # cumulative-sum bases for converting a flat cumsum into per-feature
        # prefix sums
        starts = self.offsets
        self.base_take = starts - 1     # index -1 handled by masking below
        self.first_feature_mask = starts == 0

    def _build_hist(self, idx: np.ndarray, g: np.ndarray, h: np.ndarray):
        flat = self.codes[idx].ravel()
        wg = np.repeat(g[idx], self.n_features)
        wh = np.repeat(h[idx], self.n_features)
        hg = np.bincount(flat, weights=wg, minlength=self.total_bins)
        hh = np.bincount(flat, weights=wh, minlength=self.total_bins)
        hc = np.bincount(flat, minlength=self.total_bins).astype(np.float64)
        return hg, hh, hc

    def _prefix(self, hist: np.ndarray) -> np.ndarray:
        cs = np.cumsum(hist)
        base = np.where(self.first_feature_mask, 0.0, cs[self.base_take])
        return cs - np.repeat(base, self.n_bins)

    def _find_best(self, state: _LeafState) -> None:
        lam = self.params.lambda_l2
        min_data = self.params.min_data_in_leaf
        GL = self._prefix(state.hist_g)
        HL = self._prefix(state.hist_h)
        CL = self._prefix(state.hist_c)
        G, H, C = state.grad, state.hess, float(state.idx.shape[0])
        GR = G - GL
        HR = H - HL
        CR = C - CL
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (
                GL * GL / (HL + lam)
                + GR * GR / (HR + lam)
                - G * G / (H + lam)
            )
        valid = (
            self.candidate_mask
            & (CL >= min_data)
            & (CR >= min_data)
            & np.isfinite(gain)
        )
        if not valid.any():
            state.gain = -np.inf
            state.flat_bin = -1
            return
        gain = np.where(valid, gain, -np.inf)
        best = int(np.argmax(gain))  # first occurrence: lowest feature, lowest bin
        state.gain = float(gain[best])
        state.flat_bin = best

    def grow(self, g: np.ndarray, h: np.ndarray) -> tuple[Tree, np.ndarray]:
        """Returns the tree and the per-row leaf value vector."""
        lam = self.params.lambda_l2
        n = self.codes.shape[0]

        feature = [-1]
        threshold = [-1]
        left = [-1]
        right = [-1]

        root_idx = np.arange(n, dtype=np.int64)
        hg, hh, hc = self._build_hist(root_idx, g, h)
        root = _LeafState(root_idx, float(g.sum()), float(h.sum()), hg, hh, hc, 0)
        self._find_best(root)
        leaves = [root]

        while len(leaves) < self.params.max_leaves:
            # Split the leaf with the highest gain; earliest-created wins ties.
            best_state = None
            for state in leaves:
                if state.flat_bin >= 0 and state.gain > 0.0:
                    if best_state is None or state.gain > best_state.gain:
                        best_state = state
            if best_state is None:
                break

            f = int(self.feat_of_flat[best_state.flat_bin])
            local_bin = best_state.flat_bin - int(self.offsets[f])
            idx = best_state.idx
            local = self.codes[idx, f] - int(self.offsets[f])
            mask = local <= local_bin
            idx_l = idx[mask]
            idx_r = idx[~mask]

            # build the smaller child's histogram, derive the other one
            if idx_l.shape[0] <= idx_r.shape[0]:
                hg_l, hh_l, hc_l = self._build_hist(idx_l, g, h)
                hg_r = best_state.hist_g - hg_l
                hh_r = best_state.hist_h - hh_l
                hc_r = best_state.hist_c - hc_l
            else:
                hg_r, hh_r, hc_r = self._build_hist(idx_r, g, h)
                hg_l = best_state.hist_g - hg_r
                hh_l = best_state.hist_h - hh_r
                hc_l = best_state.hist_c - hc_r

            nid_l = len(feature)
            feature.append(-1); threshold.append(-1); left.append(-1); right.append(-1)
            nid_r = len(feature)
            feature.append(-1); threshold.append(-1); left.append(-1); right.append(-1)

            feature[best_state.node_id] = f
            threshold[best_state.node_id] = local_bin
            left[best_state.node_id] = nid_l
            right[best_state.node_id] = nid_r

            child_l = _LeafState(
                idx_l, float(g[idx_l].sum()), float(h[idx_l].sum()),
                hg_l, hh_l, hc_l, nid_l,
            )
            child_r = _LeafState(
                idx_r, float(g[idx_r].sum()), float(h[idx_r].sum()),
                hg_r, hh_r, hc_r, nid_r,
            )
            self._find_best(child_l)
            self._find_best(child_r)
            leaves.remove(best_state)
            leaves.append(child_l)
            leaves.append(child_r)

        n_nodes = len(feature)
        tree = Tree(
            feature=np.array(feature, dtype=np.int32),
            threshold=np.array(threshold, dtype=np.int32),
            left=np.array(left, dtype=np.int32),
            right=np.array(right, dtype=np.int32),
            value=np.zeros(n_nodes, dtype=np.float64),
            is_leaf=np.array([l < 0 for l in left], dtype=bool),
        )
        row_values = np.zeros(n, dtype=np.float64)
        for state in leaves:
            val = -state.grad / (state.hess + lam)
            tree.value[state.node_id] = val
            row_values[state.idx] = val
        return tree, row_values


def _as_array(X) -> np.ndarray:
    if isinstance(X, FeatureMatrix):
        X = X.values
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise GbdtError("feature input must be 2-dimensional")
    return X


def fit_gbdt(X, y: Sequence[int], params: GbdtParams) -> GbdtModel:
    X = _as_array(X)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise EmptyTrainingSetError("no training rows")
    if y.shape[0] != n:
        raise DimMismatchError(f"{n} rows but {y.shape[0]} labels")
    if np.any((y != 0) & (y != 1)):
        raise LabelOutOfRangeError("labels must be 0 or 1")

    mapper = fit_bins(X, params.max_bins)
    binned = mapper.bin_matrix(X)
    n_bins = mapper.n_bins()
    offsets = np.concatenate([[0], np.cumsum(n_bins)[:-1]]).astype(np.int64)
    codes = binned.astype(np.int32) + offsets[None, :].astype(np.int32)

    base = _base_score(y)
    z = np.full(n, base, dtype=np.float64)
    loss_curve = [float(np.mean(logistic_loss(z, y)))]

    grower = _TreeGrower(codes, offsets, n_bins, params)
    trees: list[Tree] = []
    for _ in range(params.num_trees):
        g = logistic_grad(z, y)
        h = logistic_hess(z, y)
        tree, row_values = grower.grow(g, h)
        trees.append(tree)
        z = z + params.learning_rate * row_values
        loss_curve.append(float(np.mean(logistic_loss(z, y))))

    return GbdtModel(
        params=params,
        base_score=base,
        mapper=mapper,
        trees=trees,
        n_features=X.shape[1],
        loss_curve=loss_curve,
    )


def predict_margin(model: GbdtModel, X) -> np.ndarray:
    X = _as_array(X)
    if X.shape[1] != model.n_features:
        raise DimMismatchError(
            f"model expects {model.n_features} features, got {X.shape[1]}"
        )
    binned = model.mapper.bin_matrix(X)
    scores = np.full(X.shape[0], model.base_score, dtype=np.float64)
    for tree in model.trees:
        scores = scores + model.params.learning_rate * tree.predict_binned(binned)
    return scores


def predict_proba(model: GbdtModel, X) -> np.ndarray:
    """Probabilities of the positive class, clamped inside (0, 1)."""
    p = sigmoid(predict_margin(model, X))
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


# ---------------------------------------------------------------------------
# Serialization: line-oriented text, floats via repr so values round-trip
# bit-exactly. Training diagnostics (loss curve) are not persisted.
# ---------------------------------------------------------------------------


def save_gbdt(model: GbdtModel, path: str) -> None:
    p = model.params
    lines = ["gbdt-model v1"]
    lines.append(
        f"params {p.num_trees} {p.learning_rate!r} {p.max_leaves} "
        f"{p.min_data_in_leaf} {p.lambda_l2!r} {p.max_bins} {p.seed}"
    )
    lines.append(f"n_features {model.n_features}")
    lines.append(f"base_score {model.base_score!r}")
    for f, edges in enumerate(model.mapper.edges):
        parts = " ".join(repr(float(e)) for e in edges)
        lines.append(f"edges {f} {edges.shape[0]}{' ' + parts if parts else ''}")
    lines.append(f"trees {len(model.trees)}")
    for t, tree in enumerate(model.trees):
        lines.append(f"tree {t} {tree.feature.shape[0]}")
        for i in range(tree.feature.shape[0]):
            if tree.is_leaf[i]:
                lines.append(f"leaf {float(tree.value[i])!r}")
            else:
                lines.append(
                    f"split {int(tree.feature[i])} {int(tree.threshold[i])} "
                    f"{int(tree.left[i])} {int(tree.right[i])}"
                )
    lines.append("end")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_gbdt(path: str) -> GbdtModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    it = iter(lines)

    def take() -> str:
        try:
            return next(it)
        except StopIteration:
            raise ModelFormatError(f"{path}: unexpected end of file")

    if take() != "gbdt-model v1":
        raise ModelFormatError(f"{path}: unrecognized model header")
    parts = take().split()
    if parts[0] != "params" or len(parts) != 8:
        raise ModelFormatError(f"{path}: bad params line")
    params = GbdtParams(
        num_trees=int(parts[1]),
        learning_rate=float(parts[2]),
        max_leaves=int(parts[3]),
        min_data_in_leaf=int(parts[4]),
        lambda_l2=float(parts[5]),
        max_bins=int(parts[6]),
        seed=int(parts[7]),
    )
    parts = take().split()
    if parts[0] != "n_features":
        raise ModelFormatError(f"{path}: expected n_features")
    n_features = int(parts[1])
    parts = take().split()
    if parts[0] != "base_score":
        raise ModelFormatError(f"{path}: expected base_score")
    base_score = float(parts[1])

    edges: list[np.ndarray] = []
    for f in range(n_features):
        parts = take().split()
        if parts[0] != "edges" or int(parts[1]) != f:
            raise ModelFormatError(f"{path}: expected edges for feature {f}")
        count = int(parts[2])
        vals = [float(v) for v in parts[3:]]
        if len(vals) != count:
            raise ModelFormatError(f"{path}: edge count mismatch on feature {f}")
        edges.append(np.array(vals, dtype=np.float64))

    parts = take().split()
    if parts[0] != "trees":
        raise ModelFormatError(f"{path}: expected trees count")
    n_trees = int(parts[1])
    trees: list[Tree] = []
    for t in range(n_trees):
        parts = take().split()
        if parts[0] != "tree" or int(parts[1]) != t:
            raise ModelFormatError(f"{path}: expected tree {t}")
        n_nodes = int(parts[2])
        feature = np.empty(n_nodes, dtype=np.int32)
        threshold = np.empty(n_nodes, dtype=np.int32)
        left = np.empty(n_nodes, dtype=np.int32)
        right = np.empty(n_nodes, dtype=np.int32)
        value = np.zeros(n_nodes, dtype=np.float64)
        is_leaf = np.zeros(n_nodes, dtype=bool)
        for i in range(n_nodes):
            parts = take().split()
            if parts[0] == "leaf":
                feature[i] = -1
                threshold[i] = -1
                left[i] = -1
                right[i] = -1
                value[i] = float(parts[1])
                is_leaf[i] = True
            elif parts[0] == "split":
                feature[i] = int(parts[1])
                threshold[i] = int(parts[2])
                left[i] = int(parts[3])
                right[i] = int(parts[4])
            else:
                raise ModelFormatError(f"{path}: bad node line {parts[0]!r}")
        trees.append(Tree(feature, threshold, left, right, value, is_leaf))
    if take() != "end":
        raise ModelFormatError(f"{path}: missing end marker")

    return GbdtModel(
        params=params,
        base_score=base_score,
        mapper=BinMapper(edges=tuple(edges)),
        trees=trees,
        n_features=n_features,
    )
