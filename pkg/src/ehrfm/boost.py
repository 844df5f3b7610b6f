"""Histogram gradient-boosted trees with logistic loss (the count-feature baseline).

Trees grow leaf-wise: the leaf with the best second-order gain splits first,
until num_leaves or no positive gain. Histograms are accumulated over nonzero
entries only; the zero bin is implicit (node totals minus nonzero sums) and,
for thresholds that do not pin it, routes to the split side carrying more
training hessian. Split gains use the standard second-order formula with L2
leaf regularization lambda = 1.0.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import ConfigError, DataError, NumericError
from .featurize import SparseCountMatrix

log = logging.getLogger(__name__)

LAMBDA_L2 = 1.0
PREVALENCE_CLAMP = 1e-3


@dataclass(frozen=True)
class BoostConfig:
    learning_rate: float = 0.1
    num_leaves: int = 31
    n_estimators: int = 200
    min_samples_leaf: int = 20
    max_bins: int = 255
    early_stopping_rounds: int = 50
    boosting_type: str = "gbdt"

    def __post_init__(self):
        if self.boosting_type != "gbdt":
            raise ConfigError(
                f"boosting_type {self.boosting_type!r} not implemented; only 'gbdt' is supported")
        if self.learning_rate <= 0 or self.num_leaves < 2 or self.n_estimators < 1:
            raise ConfigError("learning_rate, num_leaves, n_estimators must be positive")
        if self.n_estimators > 1000:
            raise ConfigError("n_estimators capped at 1000")
        if self.min_samples_leaf < 1 or self.early_stopping_rounds < 1:
            raise ConfigError("min_samples_leaf and early_stopping_rounds must be positive")
        if not (2 <= self.max_bins <= 255):
            raise ConfigError("max_bins must lie in [2, 255]")


@dataclass
class Tree:
    """Flat node arrays; node 0 is the root. Leaves carry log-odds increments."""

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    is_leaf: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(self.is_leaf.sum())


@dataclass
class BoostedModel:
    trees: list[Tree]
    base_score: float
    config: BoostConfig
    dict_digest: str
    n_trees_used: int = field(init=False)

    def __post_init__(self):
        self.n_trees_used = len(self.trees)


class _Bins:
    """Per-feature value binning built from training data.

    Bin 0 is always the zero bin. Nonzero values map to bins 1..n via their
    upper edges; when a feature has more distinct nonzero values than
    max_bins - 1, edges fall on quantiles of the nonzero values.
    """

    def __init__(self, X: sparse.csr_matrix, max_bins: int):
        Xc = X.tocsc()
        n_features = X.shape[1]
        self.uppers: list[np.ndarray] = []
        offsets = np.zeros(n_features + 1, dtype=np.int64)
        for f in range(n_features):
            vals = Xc.data[Xc.indptr[f]:Xc.indptr[f + 1]]
            vals = vals[vals != 0]
            if vals.size == 0:
                uppers = np.empty(0, dtype=np.float64)
            else:
                uniq = np.unique(vals).astype(np.float64)
                if len(uniq) <= max_bins - 1:
                    uppers = uniq
                else:
                    qs = np.quantile(vals.astype(np.float64),
                                     np.linspace(0.0, 1.0, max_bins)[1:])
                    uppers = np.unique(qs)
            self.uppers.append(uppers)
            offsets[f + 1] = offsets[f] + len(uppers)
        self.offsets = offsets
        self.total_nz_bins = int(offsets[-1])
        # feature id for every packed nonzero-bin slot
        self.slot_feature = np.repeat(np.arange(n_features), np.diff(offsets))

    def bin_of(self, f: int, values: np.ndarray) -> np.ndarray:
        """Nonzero-bin index (1-based) for nonzero raw values of feature f."""
        return np.searchsorted(self.uppers[f], values, side="left") + 1

    def packed_slot(self, f: int, values: np.ndarray) -> np.ndarray:
        """Slot in the packed nonzero-bin space for nonzero values of feature f."""
        return self.offsets[f] + np.searchsorted(self.uppers[f], values, side="left")

    def threshold_value(self, f: int, nz_bin_index: int) -> float:
        """Raw-value threshold meaning 'nonzero value <= this goes left'."""
        return float(self.uppers[f][nz_bin_index])


class _TrainData:
    """Training matrix in both row-packed (histograms) and per-feature (partition) form."""

    def __init__(self, X: sparse.csr_matrix, bins: _Bins):
        X = X.tocsr()
        self.n_rows, self.n_features = X.shape
        self.bins = bins
        Xc = X.tocsc()
        self.col_rows: list[np.ndarray] = []
        self.col_bins: list[np.ndarray] = []
        all_rows, all_cols, all_slots = [], [], []
        for f in range(self.n_features):
            sl = slice(Xc.indptr[f], Xc.indptr[f + 1])
            vals = Xc.data[sl]
            rows = Xc.indices[sl]
            keep = vals != 0
            vals = vals[keep].astype(np.float64)
            rows = rows[keep].astype(np.int64)
            order = np.argsort(rows, kind="stable")
            vals, rows = vals[order], rows[order]
            self.col_rows.append(rows)
            self.col_bins.append(bins.bin_of(f, vals))
            if len(rows):
                all_rows.append(rows)
                all_cols.append(np.full(len(rows), f, dtype=np.int64))
                all_slots.append(bins.packed_slot(f, vals))
        if all_rows:
            rows = np.concatenate(all_rows)
            cols = np.concatenate(all_cols)
            slots = np.concatenate(all_slots)
            order = np.lexsort((cols, rows))
            rows, slots = rows[order], slots[order]
        else:
            rows = np.empty(0, dtype=np.int64)
            slots = np.empty(0, dtype=np.int64)
        self.indptr = np.zeros(self.n_rows + 1, dtype=np.int64)
        np.add.at(self.indptr, rows + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)
        self.row_slots = slots

    def gather(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(packed slots, owning-row repeats) for all nonzeros in the row subset."""
        starts = self.indptr[rows]
        lens = (self.indptr[rows + 1] - starts).astype(np.int64)
        total = int(lens.sum())
        if total == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        shift = np.concatenate(([0], np.cumsum(lens[:-1])))
        flat = np.repeat(starts - shift, lens) + np.arange(total)
        owner = np.repeat(np.arange(len(rows)), lens)
        return self.row_slots[flat], owner


class _Node:
    __slots__ = ("rows", "g_sum", "h_sum", "hist_g", "hist_h", "hist_c",
                 "best_gain", "best", "node_id")

    def __init__(self, rows, g_sum, h_sum):
        self.rows = rows
        self.g_sum = g_sum
        self.h_sum = h_sum
        self.hist_g = None
        self.hist_h = None
        self.hist_c = None
        self.best_gain = -np.inf
        self.best = None
        self.node_id = -1


def _leaf_value(g: float, h: float) -> float:
    return -g / (h + LAMBDA_L2)


def _score(g, h):
    return g * g / (h + LAMBDA_L2)


def _build_hist(data: _TrainData, node: _Node, g: np.ndarray, h: np.ndarray) -> None:
    slots, owner = data.gather(node.rows)
    nb = data.bins.total_nz_bins
    gr = g[node.rows][owner]
    hr = h[node.rows][owner]
    node.hist_g = np.bincount(slots, weights=gr, minlength=nb)
    node.hist_h = np.bincount(slots, weights=hr, minlength=nb)
    node.hist_c = np.bincount(slots, minlength=nb).astype(np.float64)


def _find_best_split(data: _TrainData, node: _Node, min_samples_leaf: int) -> None:
    """Best (feature, threshold, zero-routing) by second-order gain.

    Candidates are the zero/nonzero boundary plus every nonzero bin edge except
    the last. For edges that leave the zero bin unpinned, zeros route to the
    side whose nonzero hessian mass is larger (ties go left).
    """
    bins = data.bins
    nb = bins.total_nz_bins
    node.best_gain = -np.inf
    node.best = None
    if nb == 0:
        return
    n_node = len(node.rows)
    starts = bins.offsets[:-1]
    counts = np.diff(bins.offsets)
    parent_score = _score(node.g_sum, node.h_sum)

    # segmented prefix sums over each feature's nonzero bins
    pg = np.cumsum(node.hist_g)
    ph = np.cumsum(node.hist_h)
    pc = np.cumsum(node.hist_c)
    if len(starts) > 1:
        base_g = np.repeat(np.concatenate(([0.0], pg[starts[1:] - 1])), counts)
        base_h = np.repeat(np.concatenate(([0.0], ph[starts[1:] - 1])), counts)
        base_c = np.repeat(np.concatenate(([0.0], pc[starts[1:] - 1])), counts)
    else:
        base_g = base_h = base_c = np.zeros(nb)
    left_g = pg - base_g
    left_h = ph - base_h
    left_c = pc - base_c
    slot_feat = bins.slot_feature
    ends = bins.offsets[1:] - 1
    feats_nz = np.flatnonzero(counts > 0)
    tot_g = np.zeros(len(counts))
    tot_h = np.zeros(len(counts))
    tot_c = np.zeros(len(counts))
    tot_g[feats_nz] = left_g[ends[feats_nz]]
    tot_h[feats_nz] = left_h[ends[feats_nz]]
    tot_c[feats_nz] = left_c[ends[feats_nz]]
    nz_g = tot_g[slot_feat]
    nz_h = tot_h[slot_feat]
    nz_c = tot_c[slot_feat]
    # implicit zero-bin stats per feature, broadcast to slots
    zero_g = node.g_sum - nz_g
    zero_h = node.h_sum - nz_h
    zero_c = n_node - nz_c
    right_g = nz_g - left_g
    right_h = nz_h - left_h
    right_c = nz_c - left_c
    route_left = left_h >= right_h
    GL = left_g + np.where(route_left, zero_g, 0.0)
    HL = left_h + np.where(route_left, zero_h, 0.0)
    CL = left_c + np.where(route_left, zero_c, 0.0)
    GR = right_g + np.where(route_left, 0.0, zero_g)
    HR = right_h + np.where(route_left, 0.0, zero_h)
    CR = right_c + np.where(route_left, 0.0, zero_c)
    gains = 0.5 * (_score(GL, HL) + _score(GR, HR) - parent_score)
    is_last = np.zeros(nb, dtype=bool)
    is_last[ends[feats_nz]] = True
    valid = (~is_last) & (CL >= min_samples_leaf) & (CR >= min_samples_leaf)
    gains = np.where(valid, gains, -np.inf)

    if valid.any():
        best_slot = int(np.argmax(gains))
        gain = float(gains[best_slot])
        if gain > node.best_gain:
            f = int(slot_feat[best_slot])
            nz_index = best_slot - int(bins.offsets[f])
            node.best_gain = gain
            node.best = (f, bins.threshold_value(f, nz_index), bool(route_left[best_slot]),
                         nz_index + 1)

    # the zero/nonzero boundary split: zeros left, all nonzeros right
    if len(feats_nz):
        tg, th, tc = tot_g[feats_nz], tot_h[feats_nz], tot_c[feats_nz]
        zg = node.g_sum - tg
        zh = node.h_sum - th
        zc = n_node - tc
        ok = (zc >= min_samples_leaf) & (tc >= min_samples_leaf)
        zgain = np.where(ok, 0.5 * (_score(zg, zh) + _score(tg, th) - parent_score), -np.inf)
        if ok.any():
            zi = int(np.argmax(zgain))
            if float(zgain[zi]) > node.best_gain:
                node.best_gain = float(zgain[zi])
                node.best = (int(feats_nz[zi]), 0.0, True, 0)  # zeros pinned left

    if node.best is not None and node.best_gain <= 0.0:
        node.best = None
        node.best_gain = -np.inf


def _partition(data: _TrainData, node: _Node, feature: int, nz_bin: int,
               default_left: bool) -> tuple[np.ndarray, np.ndarray]:
    """Split node rows into (left, right) given threshold at nonzero bin index."""
    rows = node.rows
    col_rows = data.col_rows[feature]
    col_bins = data.col_bins[feature]
    pos = np.searchsorted(col_rows, rows)
    pos_clip = np.minimum(pos, len(col_rows) - 1) if len(col_rows) else pos
    found = np.zeros(len(rows), dtype=bool)
    if len(col_rows):
        found = col_rows[pos_clip] == rows
    binval = np.zeros(len(rows), dtype=np.int64)
    binval[found] = col_bins[pos_clip[found]]
    go_left = np.where(binval == 0, default_left, binval <= nz_bin)
    return rows[go_left], rows[~go_left]


def _grow_tree(data: _TrainData, g: np.ndarray, h: np.ndarray, config: BoostConfig) -> Tree:
    feature, threshold, default_left = [], [], []
    left, right, value, is_leaf = [], [], [], []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        default_left.append(True)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        is_leaf.append(True)
        return len(feature) - 1

    root = _Node(np.arange(data.n_rows, dtype=np.int64), float(g.sum()), float(h.sum()))
    root.node_id = new_node()
    _build_hist(data, root, g, h)
    _find_best_split(data, root, config.min_samples_leaf)
    open_leaves = [root]
    n_leaves = 1
    while n_leaves < config.num_leaves:
        best_i = -1
        best_gain = 0.0
        for i, nd in enumerate(open_leaves):
            if nd.best is not None and nd.best_gain > best_gain:
                best_i, best_gain = i, nd.best_gain
        if best_i < 0:
            break
        nd = open_leaves.pop(best_i)
        f, thr, dleft, nz_bin = nd.best
        rows_l, rows_r = _partition(data, nd, f, nz_bin, dleft)
        gl = float(g[rows_l].sum())
        hl = float(h[rows_l].sum())
        child_l = _Node(rows_l, gl, hl)
        child_r = _Node(rows_r, nd.g_sum - gl, nd.h_sum - hl)
        small, big = (child_l, child_r) if len(rows_l) <= len(rows_r) else (child_r, child_l)
        _build_hist(data, small, g, h)
        big.hist_g = nd.hist_g - small.hist_g
        big.hist_h = nd.hist_h - small.hist_h
        big.hist_c = nd.hist_c - small.hist_c
        nd.hist_g = nd.hist_h = nd.hist_c = None
        _find_best_split(data, child_l, config.min_samples_leaf)
        _find_best_split(data, child_r, config.min_samples_leaf)
        nid = nd.node_id
        is_leaf[nid] = False
        feature[nid] = f
        threshold[nid] = thr
        default_left[nid] = dleft
        child_l.node_id = new_node()
        child_r.node_id = new_node()
        left[nid] = child_l.node_id
        right[nid] = child_r.node_id
        open_leaves.extend([child_l, child_r])
        n_leaves += 1
    for nd in open_leaves:
        value[nd.node_id] = _leaf_value(nd.g_sum, nd.h_sum)
    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        default_left=np.asarray(default_left, dtype=bool),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
        is_leaf=np.asarray(is_leaf, dtype=bool),
    )


def _tree_predict(tree: Tree, Xc: sparse.csc_matrix, buf: np.ndarray | None = None) -> np.ndarray:
    n = Xc.shape[0]
    out = np.zeros(n, dtype=np.float64)
    buf = np.zeros(n, dtype=np.float64) if buf is None else buf
    indptr, indices, data = Xc.indptr, Xc.indices, Xc.data
    stack = [(0, np.arange(n, dtype=np.int64))]
    while stack:
        nid, rr = stack.pop()
        if len(rr) == 0:
            continue
        if tree.is_leaf[nid]:
            out[rr] = tree.value[nid]
            continue
        f = int(tree.feature[nid])
        sl = slice(indptr[f], indptr[f + 1])
        buf[indices[sl]] = data[sl]
        v = buf[rr]
        buf[indices[sl]] = 0.0
        go_left = np.where(v == 0, tree.default_left[nid], v <= tree.threshold[nid])
        stack.append((int(tree.left[nid]), rr[go_left]))
        stack.append((int(tree.right[nid]), rr[~go_left]))
    return out


def _as_csr(X) -> tuple[sparse.csr_matrix, str]:
    if isinstance(X, SparseCountMatrix):
        return X.matrix.tocsr(), X.dict_digest
    return sparse.csr_matrix(X), "unaligned"


def _logloss(y: np.ndarray, margins: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, margins) - y * margins))


def fit_gbm(X, y, X_valid=None, y_valid=None, config: BoostConfig = BoostConfig()) -> BoostedModel:
    """Stagewise boosted trees on logistic loss with early stopping on validation loss."""
    Xr, digest = _as_csr(X)
    y = np.asarray(y, dtype=np.float64)
    if Xr.shape[0] != len(y):
        raise DataError("fit_gbm: X rows must match labels")
    if len(y) < 2:
        raise DataError("fit_gbm: need at least 2 samples")
    prev = float(y.mean())
    clamped = min(max(prev, PREVALENCE_CLAMP), 1.0 - PREVALENCE_CLAMP)
    base = float(np.log(clamped / (1.0 - clamped)))
    if prev in (0.0, 1.0):
        log.warning("fit_gbm: single-class labels; constant model")
        return BoostedModel([], base, config, digest)
    bins = _Bins(Xr, config.max_bins)
    data = _TrainData(Xr, bins)
    margins = np.full(len(y), base)
    use_valid = X_valid is not None and y_valid is not None
    if use_valid:
        Xv, _ = _as_csr(X_valid)
        yv = np.asarray(y_valid, dtype=np.float64)
        Xvc = Xv.tocsc()
        v_margins = np.full(len(yv), base)
        best_loss = _logloss(yv, v_margins)
        best_iter = 0
        since_best = 0
    Xc_train = Xr.tocsc()
    train_buf = np.zeros(len(y))
    valid_buf = np.zeros(len(yv)) if use_valid else None
    trees: list[Tree] = []
    train_loss = _logloss(y, margins)
    for stage in range(config.n_estimators):
        p = expit(margins)
        g = p - y
        h = p * (1.0 - p)
        tree = _grow_tree(data, g, h, config)
        if tree.n_leaves < 2:
            break
        contrib = _tree_predict(tree, Xc_train, train_buf)
        margins = margins + config.learning_rate * contrib
        new_loss = _logloss(y, margins)
        if new_loss > train_loss + 1e-9:
            raise NumericError(
                f"boosting stage {stage} increased training log loss "
                f"({train_loss:.6f} -> {new_loss:.6f})")
        train_loss = new_loss
        trees.append(tree)
        if use_valid:
            v_margins = v_margins + config.learning_rate * _tree_predict(tree, Xvc, valid_buf)
            v_loss = _logloss(yv, v_margins)
            if v_loss < best_loss - 1e-12:
                best_loss = v_loss
                best_iter = len(trees)
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.early_stopping_rounds:
                    trees = trees[:best_iter]
                    break
    if use_valid:
        trees = trees[:best_iter] if best_iter <= len(trees) else trees
    return BoostedModel(trees, base, config, digest)


def predict_proba(model: BoostedModel, X) -> np.ndarray:
    """sigmoid(base_score + sum of learning_rate * leaf values)."""
    Xr, digest = _as_csr(X)
    if isinstance(X, SparseCountMatrix) and model.dict_digest not in ("unaligned", digest):
        raise DataError(
            f"predict_proba: feature dictionary digest mismatch "
            f"(model {model.dict_digest[:12]}..., data {digest[:12]}...)")
    Xc = Xr.tocsc()
    margins = np.full(Xr.shape[0], model.base_score)
    buf = np.zeros(Xr.shape[0], dtype=np.float64)
    for tree in model.trees:
        margins += model.config.learning_rate * _tree_predict(tree, Xc, buf)
    return expit(margins)


def valid_logloss(model: BoostedModel, X, y) -> float:
    p = predict_proba(model, X)
    y = np.asarray(y, dtype=np.float64)
    eps = 1e-15
    p = np.clip(p, eps, 1 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def tune_gbm(grid: Sequence[BoostConfig], X_train, y_train, X_valid, y_valid
             ) -> tuple[BoostedModel, list[dict]]:
    """Fit every config; pick min validation log loss, ties to (fewer trees, lower lr)."""
    if not grid:
        raise ConfigError("tune_gbm: empty grid")
    table = []
    best = None
    best_key = None
    for cfg in grid:
        model = fit_gbm(X_train, y_train, X_valid, y_valid, cfg)
        vloss = valid_logloss(model, X_valid, y_valid)
        table.append({
            "lr": cfg.learning_rate,
            "num_leaves": cfg.num_leaves,
            "n_trees_used": model.n_trees_used,
            "valid_logloss": vloss,
        })
        key = (vloss, model.n_trees_used, cfg.learning_rate)
        if best_key is None or key < best_key:
            best, best_key = model, key
    return best, table


def write_gbm(path: str | os.PathLike, model: BoostedModel) -> None:
    payload = {
        "format": 1,
        "kind": "boosted_trees",
        "base_score": model.base_score,
        "dict_digest": model.dict_digest,
        "config": {
            "learning_rate": model.config.learning_rate,
            "num_leaves": model.config.num_leaves,
            "n_estimators": model.config.n_estimators,
            "min_samples_leaf": model.config.min_samples_leaf,
            "max_bins": model.config.max_bins,
            "early_stopping_rounds": model.config.early_stopping_rounds,
            "lambda_l2": LAMBDA_L2,
        },
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "default_left": t.default_left.astype(int).tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": t.value.tolist(),
                "is_leaf": t.is_leaf.astype(int).tolist(),
            }
            for t in model.trees
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def read_gbm(path: str | os.PathLike) -> BoostedModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("kind") != "boosted_trees":
        raise DataError(f"{path}: not a boosted-trees checkpoint")
    cfg = payload["config"]
    config = BoostConfig(
        learning_rate=cfg["learning_rate"],
        num_leaves=cfg["num_leaves"],
        n_estimators=cfg["n_estimators"],
        min_samples_leaf=cfg["min_samples_leaf"],
        max_bins=cfg["max_bins"],
        early_stopping_rounds=cfg["early_stopping_rounds"],
    )
    trees = [
        Tree(
            feature=np.asarray(t["feature"], dtype=np.int64),
            threshold=np.asarray(t["threshold"], dtype=np.float64),
            default_left=np.asarray(t["default_left"], dtype=bool),
            left=np.asarray(t["left"], dtype=np.int64),
            right=np.asarray(t["right"], dtype=np.int64),
            value=np.asarray(t["value"], dtype=np.float64),
            is_leaf=np.asarray(t["is_leaf"], dtype=bool),
        )
        for t in payload["trees"]
    ]
    return BoostedModel(trees, payload["base_score"], config, payload["dict_digest"])
