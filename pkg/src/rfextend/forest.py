"""Random forest classifier that keeps the bookkeeping RF-GAP needs.

Every tree remembers its bootstrap multiplicities (``inbag_counts``), its
out-of-bag rows and the terminal node reached by each training row.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

FOREST_FORMAT_VERSION = 1


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    max_depth: int | None = None
    min_leaf: int = 1
    mtry: int | None = None
    seed: int = 0

    def resolved_mtry(self, d: int) -> int:
        mtry = self.mtry if self.mtry is not None else math.ceil(math.sqrt(d))
        if not 1 <= mtry <= d:
            raise ForestError(f"mtry must lie in [1, {d}], got {mtry}")
        return mtry


@dataclass
class Tree:
    """One fitted tree.

    Node arrays are parallel: internal nodes have ``feature >= 0`` and
    route ``x[feature] <= threshold`` to ``left``; leaves have
    ``leaf_id >= 0``. ``value`` holds bootstrap-weighted class counts.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_id: np.ndarray
    value: np.ndarray
    inbag_counts: np.ndarray
    train_leaf: np.ndarray
    oob_indices: np.ndarray = field(init=False)

    def __post_init__(self):
        self.inbag_counts = np.asarray(self.inbag_counts, dtype=np.int64)
        self.oob_indices = np.flatnonzero(self.inbag_counts == 0)
        leaves = np.flatnonzero(self.leaf_id >= 0)
        self._leaf_nodes = leaves[np.argsort(self.leaf_id[leaves])]

    @property
    def n_leaves(self) -> int:
        return len(self._leaf_nodes)

    @property
    def leaf_class(self) -> np.ndarray:
        """Majority class per leaf id (lowest class id on ties)."""
        return np.argmax(self.value[self._leaf_nodes], axis=1)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return self.leaf_id[node]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaf_id": self.leaf_id.tolist(),
            "value": self.value.tolist(),
            "inbag_counts": self.inbag_counts.tolist(),
            "train_leaf": self.train_leaf.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            leaf_id=np.asarray(d["leaf_id"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64).reshape(len(d["feature"]), -1),
            inbag_counts=np.asarray(d["inbag_counts"], dtype=np.int64),
            train_leaf=np.asarray(d["train_leaf"], dtype=np.int64),
        )


@dataclass
class Forest:
    trees: list
    n_train: int
    n_features: int
    class_count: int
    params: ForestParams

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def to_json(self) -> str:
        doc = {
            "format": "rfextend.forest",
            "format_version": FOREST_FORMAT_VERSION,
            "params": asdict(self.params),
            "n_train": self.n_train,
            "n_features": self.n_features,
            "class_count": self.class_count,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        doc = json.loads(text)
        if doc.get("format_version") != FOREST_FORMAT_VERSION:
            raise ForestError(f"unsupported forest format version {doc.get('format_version')}")
        return cls(
            trees=[Tree.from_dict(t) for t in doc["trees"]],
            n_train=doc["n_train"],
            n_features=doc["n_features"],
            class_count=doc["class_count"],
            params=ForestParams(**doc["params"]),
        )


def _best_split(Xn, Wn, feats, min_leaf):
    """Best Gini split of a node over the candidate features.

    ``Wn`` is the (m, C) matrix of bootstrap-weighted one-hot labels. Returns
    ``(feature, threshold)`` or ``None`` when no admissible split exists.
    """
    Xf = Xn[:, feats]
    order = np.argsort(Xf, axis=0, kind="stable")
    xs = np.take_along_axis(Xf, order, axis=0)
    left = np.cumsum(Wn[order], axis=0)[:-1]  # (m-1, f, C)
    total = Wn.sum(axis=0)
    right = total - left
    n_left = left.sum(axis=2)
    n_right = total.sum() - n_left
    ok = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not ok.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (left**2).sum(axis=2) / n_left + (right**2).sum(axis=2) / n_right
    score = np.where(ok, score, -np.inf)
    pos = np.argmax(score, axis=0)  # first = lowest threshold per feature
    per_feat = score[pos, np.arange(len(feats))]
    best = per_feat.max()
    tied = np.flatnonzero(per_feat == best)
    k = tied[np.argmin(np.asarray(feats)[tied])]
    p = pos[k]
    lo, hi = xs[p, k], xs[p + 1, k]
    thr = lo + (hi - lo) / 2.0
    if thr >= hi:
        thr = lo
    return int(feats[k]), float(thr)


def _grow_tree(X, y, n_classes, counts, params: ForestParams, mtry, rng) -> Tree:
    n, d = X.shape
    feature, threshold, left, right, leaf_id, value = [], [], [], [], [], []
    train_leaf = np.full(n, -1, dtype=np.int64)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    W = onehot * counts[:, None]
    max_depth = params.max_depth if params.max_depth is not None else np.inf

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (leaf_id, -1)):
            arr.append(v)
        value.append(None)
        return len(feature) - 1

    # stack entries: (node, sample indices of all training rows reaching it, depth)
    root = new_node()
    stack = [(root, np.arange(n), 0)]
    n_leaf = 0
    while stack:
        node, rows, depth = stack.pop()
        members = rows[counts[rows] > 0]
        cls_counts = W[members].sum(axis=0)
        value[node] = cls_counts
        split = None
        if (
            depth < max_depth
            and np.count_nonzero(cls_counts) > 1
            and cls_counts.sum() >= 2 * params.min_leaf
        ):
            perm = rng.permutation(d)
            for start in range(0, d, mtry):
                feats = np.sort(perm[start : start + mtry])
                split = _best_split(X[members], W[members], feats, params.min_leaf)
                if split is not None:
                    break
        if split is None:
            leaf_id[node] = n_leaf
            train_leaf[rows] = n_leaf
            n_leaf += 1
            continue
        f, thr = split
        feature[node], threshold[node] = f, thr
        go_left = X[rows, f] <= thr
        lnode, rnode = new_node(), new_node()
        left[node], right[node] = lnode, rnode
        # right pushed first so the left subtree is numbered first
        stack.append((rnode, rows[~go_left], depth + 1))
        stack.append((lnode, rows[go_left], depth + 1))
    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        leaf_id=np.asarray(leaf_id, dtype=np.int64),
        value=np.vstack(value),
        inbag_counts=counts,
        train_leaf=train_leaf,
    )


def _fit_one(X, y, n_classes, params, mtry, t, sample_ids):
    rng = np.random.default_rng([params.seed, t])
    n = X.shape[0]
    counts = np.bincount(rng.integers(0, n, size=n), minlength=n)
    if sample_ids is not None:
        counts = counts[sample_ids]
    return _grow_tree(X, y, n_classes, counts, params, mtry, rng)


def fit_forest(ds, train_indices=None, params: ForestParams | None = None, *,
               sample_ids=None, n_jobs: int = 1) -> Forest:
    """Fit a Gini random forest on ``ds`` rows ``train_indices``.

    Tree ``t`` draws its bootstrap and feature subsets from a generator
    seeded with ``(params.seed, t)``, so results do not depend on
    ``n_jobs``. ``sample_ids`` (a permutation of ``range(n_train)``) ties
    bootstrap draws to row identities instead of row positions.
    """
    params = params or ForestParams()
    if params.n_trees < 1:
        raise ForestError("n_trees must be >= 1")
    if params.min_leaf < 1:
        raise ForestError("min_leaf must be >= 1")
    if train_indices is None:
        train_indices = np.arange(ds.n)
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.size == 0:
        raise ForestError("empty training set")
    X = ds.features[train_indices]
    y = ds.labels[train_indices]
    mtry = params.resolved_mtry(X.shape[1])
    if sample_ids is not None:
        sample_ids = np.asarray(sample_ids, dtype=np.int64)
        if sorted(sample_ids.tolist()) != list(range(len(X))):
            raise ForestError("sample_ids must be a permutation of the training rows")
    jobs = [(X, y, ds.n_classes, params, mtry, t, sample_ids) for t in range(params.n_trees)]
    if n_jobs == 1:
        trees = [_fit_one(*job) for job in jobs]
    else:
        from joblib import Parallel, delayed

        trees = Parallel(n_jobs=n_jobs)(delayed(_fit_one)(*job) for job in jobs)
    return Forest(trees, len(X), X.shape[1], ds.n_classes, params)


def _as_matrix(f: Forest, x) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != f.n_features:
        raise ForestError(
            f"expected {f.n_features} features, got shape {np.shape(x)}"
        )
    return X


def apply(f: Forest, x) -> np.ndarray:
    """Leaf ids per tree: shape ``(n_trees,)`` for one vector, ``(q, n_trees)`` for a matrix."""
    X = _as_matrix(f, x)
    if not f.trees:
        raise ForestError("empty forest")
    leaves = np.column_stack([t.apply(X) for t in f.trees])
    return leaves[0] if np.ndim(x) == 1 else leaves


def _vote(f: Forest, leaves, tree_mask=None):
    votes = np.zeros((leaves.shape[0], f.class_count))
    rows = np.arange(leaves.shape[0])
    for k, t in enumerate(f.trees):
        cls = t.leaf_class[leaves[:, k]]
        w = 1.0 if tree_mask is None else tree_mask[:, k]
        np.add.at(votes, (rows, cls), w)
    return votes


def predict(f: Forest, x) -> np.ndarray:
    """Majority vote of per-tree leaf majorities; ties go to the lowest class id."""
    X = _as_matrix(f, x)
    pred = np.argmax(_vote(f, apply(f, X)), axis=1)
    return pred[0] if np.ndim(x) == 1 else pred


def oob_accuracy(f: Forest, ds) -> float:
    """Accuracy of out-of-bag votes on the forest's own training rows.

    ``ds`` holds exactly those training rows. Rows that are in-bag in every
    tree have no OOB vote and are left out.
    """
    if ds.n != f.n_train:
        raise ForestError("dataset does not match the forest's training rows")
    leaves = np.column_stack([t.train_leaf for t in f.trees])
    oob = np.column_stack([t.inbag_counts == 0 for t in f.trees]).astype(float)
    covered = oob.sum(axis=1) > 0
    if not covered.any():
        return float("nan")
    pred = np.argmax(_vote(f, leaves, oob), axis=1)
    return float(np.mean(pred[covered] == ds.labels[covered]))
