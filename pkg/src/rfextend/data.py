"""Dataset ingestion, validation, standardization and train/test splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

BUILTIN_DATASETS = {
    "iris": "species",
    "wine": "cultivar",
    "breast_cancer": "diagnosis",
    "ionosphere": "class",
}


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with categorical class ids.

    Attributes
    ----------
    features : ndarray of shape (n, d), float64
    labels : ndarray of shape (n,), int64 class ids in ``0..C-1``
    feature_names : list of str
    class_names : list of str
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        n, d = X.shape
        if n < 2:
            raise DataError(f"need at least 2 rows, got {n}")
        if d < 1:
            raise DataError("no feature columns")
        if y.shape != (n,):
            raise DataError(f"labels must have length {n}, got shape {y.shape}")
        bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
        if bad.size:
            raise DataError(f"non-finite feature value in row {bad[0]}")
        names = list(self.feature_names) or [f"x{j}" for j in range(d)]
        if len(names) != d:
            raise DataError("feature_names length does not match feature count")
        classes = list(self.class_names)
        if not classes:
            classes = [str(c) for c in range(int(y.max()) + 1)] if n else []
        if y.min() < 0 or y.max() >= len(classes):
            raise DataError("label ids must lie in 0..C-1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "class_names", classes)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "Dataset":
        """Rows ``indices`` as a new Dataset sharing the class vocabulary."""
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, features=self.features[indices], labels=self.labels[indices])


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise DataError("train_fraction must lie in (0, 1]")
        if self.seed < 0:
            raise DataError("seed must be non-negative")


def _parse_float(text: str):
    try:
        return float(text)
    except ValueError:
        return None


def read_feature_table(path):
    """Read a CSV into ``(header, columns)`` with all cells as raw strings."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DataError(
                f"{path}: data row {i} has {len(r)} cells, header has {len(header)}"
            )
    return header, body


def encode_features(header, body, skip=(), source="input"):
    """Turn raw string columns into a numeric matrix.

    Columns whose every cell fails to parse as a real are treated as
    categorical and one-hot encoded (levels in first-appearance order).
    A column mixing numbers and text is an error.
    """
    blocks, names = [], []
    for j, name in enumerate(header):
        if j in skip:
            continue
        cells = [r[j].strip() for r in body]
        for i, c in enumerate(cells):
            if c == "":
                raise DataError(f"{source}: missing value at row {i}, column '{name}'")
        parsed = [_parse_float(c) for c in cells]
        n_bad = sum(p is None for p in parsed)
        if n_bad == 0:
            col = np.array(parsed, dtype=np.float64)
            bad = np.flatnonzero(~np.isfinite(col))
            if bad.size:
                raise DataError(
                    f"{source}: non-finite value at row {bad[0]}, column '{name}'"
                )
            blocks.append(col[:, None])
            names.append(name)
        elif n_bad == len(cells):
            levels = list(dict.fromkeys(cells))
            onehot = np.zeros((len(cells), len(levels)))
            onehot[np.arange(len(cells)), [levels.index(c) for c in cells]] = 1.0
            blocks.append(onehot)
            names.extend(f"{name}={lev}" for lev in levels)
        else:
            i = next(i for i, p in enumerate(parsed) if p is None)
            raise DataError(
                f"{source}: unparseable numeric cell '{cells[i]}' at row {i}, column '{name}'"
            )
    if not blocks:
        raise DataError(f"{source}: no feature columns")
    return np.hstack(blocks), names


def load_csv(path, label_column: str) -> Dataset:
    """Load a labelled CSV file.

    Numeric columns become features, text-only columns are one-hot encoded,
    and ``label_column`` is mapped to class ids in first-appearance order.
    """
    header, body = read_feature_table(path)
    if label_column not in header:
        raise DataError(f"{path}: label column '{label_column}' not found")
    if len(body) < 2:
        raise DataError(f"{path}: need at least 2 data rows, got {len(body)}")
    li = header.index(label_column)
    raw_labels = [r[li].strip() for r in body]
    class_names = list(dict.fromkeys(raw_labels))
    lookup = {c: k for k, c in enumerate(class_names)}
    labels = np.array([lookup[c] for c in raw_labels], dtype=np.int64)
    X, names = encode_features(header, body, skip={li}, source=str(path))
    return Dataset(X, labels, names, class_names)


def load_unlabeled_csv(path, feature_names=None, drop_columns=()) -> np.ndarray:
    """Load a feature-only CSV.

    With ``feature_names`` only the matching columns are parsed (anything
    else, such as a label column, is never read) and the result follows
    that column order.
    """
    header, body = read_feature_table(path)
    if not body:
        raise DataError(f"{path}: no data rows")
    skip = {j for j, h in enumerate(header) if h in set(drop_columns)}
    if feature_names is not None:
        wanted = {f.split("=", 1)[0] for f in feature_names} | set(feature_names)
        skip |= {j for j, h in enumerate(header) if h not in wanted}
    X, names = encode_features(header, body, skip=skip, source=str(path))
    if feature_names is None:
        return X
    present = {h for j, h in enumerate(header) if j not in skip}
    out = np.zeros((X.shape[0], len(feature_names)))
    for k, f in enumerate(feature_names):
        if f in names:
            out[:, k] = X[:, names.index(f)]
        elif "=" in f and f.split("=", 1)[0] in present:
            continue  # one-hot level absent from this file
        else:
            raise DataError(f"{path}: missing feature column '{f}'")
    return out


def write_csv(ds: Dataset, path, label_column: str = "label") -> None:
    """Write ``ds`` so that :func:`load_csv` reads back an equal Dataset."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.feature_names) + [label_column])
        for row, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [ds.class_names[lab]])


def builtin_path(name: str) -> Path:
    if name not in BUILTIN_DATASETS:
        raise DataError(f"unknown builtin dataset '{name}'")
    return Path(str(resources.files("rfextend") / "datasets" / f"{name}.csv"))


def load_builtin(name: str) -> Dataset:
    """One of the bundled UCI tables: iris, wine, breast_cancer, ionosphere."""
    return load_csv(builtin_path(name), BUILTIN_DATASETS[name])


def split(ds: Dataset, spec: SplitSpec):
    """Random train/test partition of row indices.

    Returns sorted ``(train_indices, test_indices)``. With ``stratified``
    each class contributes ``round(train_fraction * class_size)`` rows.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        train = []
        for c in range(ds.n_classes):
            members = np.flatnonzero(ds.labels == c)
            if members.size == 0:
                continue
            if members.size < 2:
                raise DataError(
                    f"class '{ds.class_names[c]}' has a single member; cannot stratify"
                )
            k = int(round(spec.train_fraction * members.size))
            train.append(rng.permutation(members)[:k])
        train = np.concatenate(train)
    else:
        k = int(round(spec.train_fraction * ds.n))
        train = rng.permutation(ds.n)[:k]
    train = np.sort(train)
    test = np.setdiff1d(np.arange(ds.n), train)
    return train, test


def standardize(ds: Dataset, train_indices):
    """Z-score features with statistics from the training rows only.

    Returns the transformed Dataset and ``(mean, scale)``; zero-variance
    features get scale 1.
    """
    train_indices = np.asarray(train_indices)
    if train_indices.size == 0:
        raise DataError("standardize needs at least one training row")
    mean, scale = feature_stats(ds.features[train_indices])
    return replace(ds, features=(ds.features - mean) / scale), (mean, scale)


def feature_stats(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


__all__ = [
    "Dataset",
    "SplitSpec",
    "DataError",
    "load_csv",
    "load_unlabeled_csv",
    "write_csv",
    "load_builtin",
    "builtin_path",
    "split",
    "standardize",
    "feature_stats",
]
