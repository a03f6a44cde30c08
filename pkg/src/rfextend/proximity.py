"""RF-GAP proximities, their out-of-sample extension, and class prototypes.

For a query ``x0`` and training row ``j`` the per-tree contribution is
``c_j(t) / |M_0(t)|`` when ``j`` is in-bag in the leaf reached by ``x0``,
where ``|M_0(t)|`` is the in-bag multiplicity total of that leaf. Queries
average over all trees; training rows average only over the trees in which
they are out-of-bag.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .forest import Forest, ForestError, apply

SELF_SIMILARITY_MODES = ("zero", "inbag_passdown")


class ProximityError(ValueError):
    pass


@dataclass(frozen=True)
class ProximityMatrix:
    values: np.ndarray
    kind: str = "train"
    self_similarity_mode: str | None = "zero"

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self, path) -> None:
        """Dense export with a header of column indices and a leading row index."""
        q, n = self.values.shape
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row"] + [str(j) for j in range(n)])
            for i in range(q):
                w.writerow([str(i)] + [repr(float(v)) for v in self.values[i]])

    @classmethod
    def from_csv(cls, path, kind="train", self_similarity_mode="zero") -> "ProximityMatrix":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(values, kind, self_similarity_mode)


@dataclass(frozen=True)
class PrototypeSet:
    indices: np.ndarray
    per_class_counts: np.ndarray
    fraction: float


def _leaf_weights(f: Forest):
    """Sparse (total_leaves, n_train) matrix of ``c_j(t) / |M_l(t)|`` plus per-tree leaf offsets."""
    offsets = np.zeros(f.n_trees + 1, dtype=np.int64)
    rows, cols, vals = [], [], []
    for k, t in enumerate(f.trees):
        offsets[k + 1] = offsets[k] + t.n_leaves
        inbag = np.flatnonzero(t.inbag_counts)
        leaf = t.train_leaf[inbag]
        mass = np.bincount(leaf, weights=t.inbag_counts[inbag], minlength=t.n_leaves)
        rows.append(offsets[k] + leaf)
        cols.append(inbag)
        vals.append(t.inbag_counts[inbag] / mass[leaf])
    W = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(offsets[-1], f.n_train),
    )
    return W, offsets


def _membership(leaves, offsets, mask=None):
    """Sparse (q, total_leaves) indicator of the leaf each query reaches in each tree."""
    q, T = leaves.shape
    cols = leaves + offsets[:-1][None, :]
    data = np.ones(q * T) if mask is None else mask.astype(np.float64).ravel()
    return sparse.csr_matrix(
        (data, (np.repeat(np.arange(q), T), cols.ravel())), shape=(q, offsets[-1])
    )


def _check_forest(f: Forest, ds):
    if f.n_trees == 0:
        raise ProximityError("empty forest")
    if ds is not None and ds.n != f.n_train:
        raise ProximityError(
            f"dataset has {ds.n} rows but the forest was trained on {f.n_train}"
        )


def extend_proximities(f: Forest, ds, queries) -> ProximityMatrix:
    """Proximities from unlabeled query points to every training row.

    Each query is treated as out-of-bag in every tree. A leaf with no in-bag
    rows contributes nothing to the row.
    """
    _check_forest(f, ds)
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim == 1:
        Q = Q[None, :]
    try:
        leaves = apply(f, Q)
    except ForestError as exc:
        raise ProximityError(str(exc)) from exc
    W, offsets = _leaf_weights(f)
    P = (_membership(leaves, offsets) @ W).toarray() / f.n_trees
    return ProximityMatrix(P, "out_of_sample", None)


def _train_parts(f: Forest):
    leaves = np.column_stack([t.train_leaf for t in f.trees])
    oob = np.column_stack([t.inbag_counts == 0 for t in f.trees])
    n_oob = oob.sum(axis=1)
    if np.any(n_oob == 0):
        i = int(np.flatnonzero(n_oob == 0)[0])
        raise ProximityError(
            f"training row {i} is in-bag in every tree; fit more trees"
        )
    return leaves, oob, n_oob


def train_proximities(f: Forest, ds, mode: str = "zero") -> ProximityMatrix:
    """Square RF-GAP proximities among the training rows.

    Row ``i`` averages over the trees where ``i`` is out-of-bag. The
    diagonal is 0 (``mode="zero"``) or the in-bag pass-down
    self-similarity (``mode="inbag_passdown"``).
    """
    if mode not in SELF_SIMILARITY_MODES:
        raise ProximityError(f"unknown self-similarity mode '{mode}'")
    _check_forest(f, ds)
    leaves, oob, n_oob = _train_parts(f)
    W, offsets = _leaf_weights(f)
    P = (_membership(leaves, offsets, oob) @ W).toarray() / n_oob[:, None]
    if mode == "zero":
        np.fill_diagonal(P, 0.0)
    else:
        np.fill_diagonal(P, _self_similarities(f))
    return ProximityMatrix(P, "train", mode)


def _self_similarities(f: Forest) -> np.ndarray:
    total = np.zeros(f.n_train)
    n_inbag = np.zeros(f.n_train)
    for t in f.trees:
        inbag = np.flatnonzero(t.inbag_counts)
        leaf = t.train_leaf[inbag]
        mass = np.bincount(leaf, weights=t.inbag_counts[inbag], minlength=t.n_leaves)
        total[inbag] += t.inbag_counts[inbag] / mass[leaf]
        n_inbag[inbag] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return total / n_inbag


def self_similarity(f: Forest, ds, i: int) -> float:
    """Pass-down self-similarity of training row ``i``.

    Averages ``c_i(t) / |M_i(t)|`` over the trees where ``i`` is in-bag.
    """
    _check_forest(f, ds)
    if not 0 <= i < f.n_train:
        raise ProximityError(f"index {i} out of range")
    s = _self_similarities(f)[i]
    if not np.isfinite(s):
        raise ProximityError(f"training row {i} is out-of-bag in every tree")
    return float(s)


def symmetrize(P) -> np.ndarray:
    """``(P + P.T) / 2``."""
    V = P.values if isinstance(P, ProximityMatrix) else np.asarray(P, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise ProximityError(f"symmetrize needs a square matrix, got {V.shape}")
    return (V + V.T) / 2.0


def select_prototypes(P, labels, fraction: float) -> PrototypeSet:
    """Most central members of each class.

    Members are ranked by mean proximity to the other members of their class
    (diagonal excluded) and the top ``max(1, round(fraction * size))`` kept;
    ties go to the lower index.
    """
    V = P.values if isinstance(P, ProximityMatrix) else np.asarray(P, dtype=np.float64)
    labels = np.asarray(labels)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise ProximityError("prototype selection needs a square training matrix")
    if len(labels) != V.shape[0]:
        raise ProximityError("labels do not match the proximity matrix")
    if not 0.0 < fraction <= 1.0:
        raise ProximityError("fraction must lie in (0, 1]")
    classes = np.unique(labels)
    chosen, counts = [], np.zeros(int(labels.max()) + 1, dtype=np.int64)
    for c in classes:
        members = np.flatnonzero(labels == c)
        k = max(1, int(round(fraction * members.size)))
        block = V[np.ix_(members, members)]
        if members.size > 1:
            score = (block.sum(axis=1) - np.diag(block)) / (members.size - 1)
        else:
            score = np.zeros(1)
        order = np.lexsort((members, -score))
        chosen.append(members[order[:k]])
        counts[c] = k
    return PrototypeSet(np.sort(np.concatenate(chosen)), counts, float(fraction))
