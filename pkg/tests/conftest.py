"""Shared fixtures."""

import pytest

from oracles import make_blobs, random_dataset
from rfextend.forest import ForestParams, fit_forest


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(200, sep=8.0, seed=1)


@pytest.fixture(scope="session")
def small_forest():
    ds = random_dataset(50, 3, 3, seed=11)
    f = fit_forest(ds, None, ForestParams(n_trees=30, seed=5))
    return f, ds


@pytest.fixture(scope="session")
def toy_pipeline():
    """A small trained setting shared by autoencoder and CLI-independent tests."""
    from rfextend.embed import DiffusionConfig, rfphate_embed

    ds = make_blobs(60, d=3, n_classes=3, sep=4.0, seed=3)
    f = fit_forest(ds, None, ForestParams(n_trees=60, seed=2))
    G = rfphate_embed(f, ds, DiffusionConfig(seed=0))
    return ds, f, G
