"""Inferring user attributes from the recommendation lists a recommender serves."""

__version__ = "0.1.0"

from .core import Attribute, Dataset, ProviderPartition, SeedPolicy, Split, partition_providers, split_dataset
from .harness import ScenarioConfig, ScenarioReport, evaluate, run_scenario, sweep
from .ingest import EmbeddingTable, SyntheticSpec, generate_synthetic, load_dataset
from .recsys import RecommenderModel, TrainConfig, train_recommender
from .surrogate import RecListSet, compute_rls

__all__ = [
    "Attribute",
    "Dataset",
    "EmbeddingTable",
    "ProviderPartition",
    "RecListSet",
    "RecommenderModel",
    "ScenarioConfig",
    "ScenarioReport",
    "SeedPolicy",
    "Split",
    "SyntheticSpec",
    "TrainConfig",
    "compute_rls",
    "evaluate",
    "generate_synthetic",
    "load_dataset",
    "partition_providers",
    "run_scenario",
    "split_dataset",
    "sweep",
    "train_recommender",
]
