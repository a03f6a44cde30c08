"""Supervised random-forest embeddings with autoencoder out-of-sample extension."""

from .autoencoder import (
    AEModel,
    TrainConfig,
    VARIANTS,
    build_io,
    extend,
    fit_extension,
)
from .data import Dataset, SplitSpec, load_builtin, load_csv, split, standardize
from .embed import DiffusionConfig, Embedding, mds, rfphate_embed
from .evaluation import ExperimentConfig, ExperimentReport, mantel, pairwise_distances, run_experiment
from .forest import Forest, ForestParams, apply, fit_forest, oob_accuracy, predict
from .proximity import (
    ProximityMatrix,
    extend_proximities,
    select_prototypes,
    self_similarity,
    symmetrize,
    train_proximities,
)

__version__ = "0.1.0"
