"""Adaptive search over complexity-regularized ensembles of small models."""

from .cluster import ClusterConfig, run_cluster
from .data import Dataset, load_csv, two_gaussians
from .ensemble import EnsembleModel, ObjectiveConfig, fit_mixture_weights, objective
from .search import AutoEnsembleSearch, SearchConfig
from .subnetworks import GeneratorConfig, SubnetworkSpec

__all__ = [
    "AutoEnsembleSearch",
    "ClusterConfig",
    "Dataset",
    "EnsembleModel",
    "GeneratorConfig",
    "ObjectiveConfig",
    "SearchConfig",
    "SubnetworkSpec",
    "fit_mixture_weights",
    "load_csv",
    "objective",
    "run_cluster",
    "two_gaussians",
]
