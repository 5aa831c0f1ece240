"""Uncertainty fine-tuning of multi-head classifiers over frozen embeddings."""
from . import baselines, dataset, metrics, multihead, neighbors, objective
from ._kernels import backend

__version__ = "0.1.0"

__all__ = ["baselines", "dataset", "metrics", "multihead", "neighbors", "objective", "backend", "__version__"]
