import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfextend.data import (
    DataError,
    Dataset,
    SplitSpec,
    load_builtin,
    load_csv,
    load_unlabeled_csv,
    split,
    standardize,
    write_csv,
)


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadCsv:
    def test_first_appearance_encoding(self, tmp_path):
        p = write(tmp_path, "x,y,lab\n1,2,a\n3,4,b\n5,6,a\n")
        ds = load_csv(p, "lab")
        assert ds.labels.tolist() == [0, 1, 0]
        assert ds.class_names == ["a", "b"]
        assert ds.feature_names == ["x", "y"]

    def test_label_only_file(self, tmp_path):
        p = write(tmp_path, "lab\na\nb\n")
        with pytest.raises(DataError, match="no feature columns"):
            load_csv(p, "lab")

    def test_iris_shape(self):
        # row/column counts of the public Iris table
        ds = load_builtin("iris")
        assert (ds.n, ds.d, ds.n_classes) == (150, 4, 3)

    def test_missing_label_column(self, tmp_path):
        p = write(tmp_path, "x,lab\n1,a\n2,b\n")
        with pytest.raises(DataError, match="label column"):
            load_csv(p, "species")

    def test_mixed_column_reports_location(self, tmp_path):
        p = write(tmp_path, "x,lab\n1,a\nfoo,b\n")
        with pytest.raises(DataError, match="row 1"):
            load_csv(p, "lab")

    def test_missing_cell(self, tmp_path):
        p = write(tmp_path, "x,z,lab\n1,,a\n2,3,b\n")
        with pytest.raises(DataError, match="missing value"):
            load_csv(p, "lab")

    def test_categorical_one_hot(self, tmp_path):
        p = write(tmp_path, "x,colour,lab\n1,red,a\n2,blue,b\n3,red,a\n")
        ds = load_csv(p, "lab")
        assert ds.feature_names == ["x", "colour=red", "colour=blue"]
        np.testing.assert_array_equal(ds.features[:, 1:], [[1, 0], [0, 1], [1, 0]])

    def test_unlabeled_ignores_label_column(self, tmp_path):
        p = write(tmp_path, "x,y,lab\n1,2,???\n3,4,\n")
        X = load_unlabeled_csv(p, ["x", "y"])
        np.testing.assert_array_equal(X, [[1, 2], [3, 4]])

    def test_unlabeled_missing_feature(self, tmp_path):
        p = write(tmp_path, "x\n1\n2\n")
        with pytest.raises(DataError, match="missing feature"):
            load_unlabeled_csv(p, ["x", "y"])

    def test_round_trip(self, tmp_path):
        ds = load_builtin("wine")
        write_csv(ds, tmp_path / "w.csv", "cultivar")
        back = load_csv(tmp_path / "w.csv", "cultivar")
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.class_names == ds.class_names
        assert back.feature_names == ds.feature_names


class TestSplit:
    def test_cardinality_unstratified(self):
        ds = Dataset(np.arange(20.0).reshape(10, 2), np.zeros(10, dtype=int))
        tr, te = split(ds, SplitSpec(0.7, seed=3, stratified=False))
        assert len(tr) == 7 and len(te) == 3
        assert not set(tr) & set(te)

    def test_deterministic(self):
        ds = load_builtin("iris")
        a = split(ds, SplitSpec(0.7, seed=4))
        b = split(ds, SplitSpec(0.7, seed=4))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_iris_stratified(self):
        ds = load_builtin("iris")
        tr, _ = split(ds, SplitSpec(0.7, seed=0))
        assert np.bincount(ds.labels[tr]).tolist() == [35, 35, 35]

    def test_singleton_class(self):
        ds = Dataset(np.arange(6.0)[:, None], np.array([0, 0, 0, 1, 1, 2]))
        with pytest.raises(DataError, match="single member"):
            split(ds, SplitSpec(0.5))

    @settings(max_examples=40, deadline=None)
    @given(
        n=st.integers(4, 60),
        frac=st.floats(0.1, 1.0),
        seed=st.integers(0, 1000),
        stratified=st.booleans(),
    )
    def test_partition(self, n, frac, seed, stratified):
        y = np.arange(n) % 2
        ds = Dataset(np.arange(n, dtype=float)[:, None], y)
        tr, te = split(ds, SplitSpec(frac, seed, stratified))
        assert sorted(np.concatenate([tr, te]).tolist()) == list(range(n))
        assert not set(tr.tolist()) & set(te.tolist())


class TestStandardize:
    def test_constant_column(self):
        X = np.column_stack([np.full(4, 3.0), [1.0, 2, 3, 4]])
        out, (mean, scale) = standardize(Dataset(X, np.zeros(4, dtype=int)), np.arange(4))
        np.testing.assert_array_equal(out.features[:, 0], 0.0)
        assert scale[0] == 1.0

    def test_identity_on_standardized(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((30, 3))
        X = (X - X.mean(0)) / X.std(0)
        out, _ = standardize(Dataset(X, np.zeros(30, dtype=int)), np.arange(30))
        np.testing.assert_allclose(out.features, X, atol=1e-12)

    def test_hand_z_scores(self):
        X = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0]])
        ds = Dataset(X, np.zeros(4, dtype=int))
        out, _ = standardize(ds, [0, 1])
        # training rows 0,1: means (1.5, 15), population stds (0.5, 5)
        expected = np.array([[-1.0, -1.0], [1.0, 1.0], [3.0, 3.0], [5.0, 5.0]])
        np.testing.assert_allclose(out.features, expected, atol=1e-12)

    def test_empty_train(self):
        ds = Dataset(np.ones((3, 1)), np.zeros(3, dtype=int))
        with pytest.raises(DataError):
            standardize(ds, [])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(3.0, 5.0, (12, 3))
        ds = Dataset(X, np.zeros(12, dtype=int))
        once, _ = standardize(ds, np.arange(12))
        twice, _ = standardize(once, np.arange(12))
        np.testing.assert_allclose(twice.features, once.features, atol=1e-10)
