"""Matrix factorization regularized by coupled item-attribute similarity."""

__version__ = "0.1.0"

from .coupling import CouplingConfig, SimilarityGraph, build_graph, laplacian
from .dataset import (ItemAttributeTable, SparseRatingMatrix, bucket_items, compute_stats,
                      kfold_split, load_attributes, load_ratings, read_movielens_items)
from .errors import DataError, DivergenceError, StaleCacheError
from .evaluation import coldstart_eval, cross_validate, evaluate, sweep
from .factorization import FactorModel, TrainConfig, objective, train, train_rsvd

__all__ = [
    "CouplingConfig", "SimilarityGraph", "build_graph", "laplacian",
    "ItemAttributeTable", "SparseRatingMatrix", "bucket_items", "compute_stats", "kfold_split",
    "load_attributes", "load_ratings", "read_movielens_items",
    "DataError", "DivergenceError", "StaleCacheError",
    "coldstart_eval", "cross_validate", "evaluate", "sweep",
    "FactorModel", "TrainConfig", "objective", "train", "train_rsvd",
]
