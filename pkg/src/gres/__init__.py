"""Graph-based cross-domain recommendation for supply-chain platforms.

Domain A (purchases) is embedded through a heterogeneous user/category/item
graph and node2vec; domain B (dishes sold) through per-user tree-shaped graphs
encoded by a GCN and a small transformer. An element-wise gate fuses the two
views and an MLP scores user-item pairs.
"""
from .config import RunConfig
from .data import Dataset, EntityId, GenConfig, generate_synthetic, load_dataset, save_dataset
from .evaluation import MetricsReport, evaluate, popularity_baseline, split_dataset
from .model import GReSModel, TrainConfig, combine, combine_partial, score, train
from .pipeline import prepare, run_ablation, run_m_sweep, run_variant
from .tree2vec import VARIANTS, TreeFlags

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "Dataset", "EntityId", "GenConfig", "generate_synthetic", "load_dataset",
    "save_dataset", "MetricsReport", "evaluate", "popularity_baseline", "split_dataset",
    "GReSModel", "TrainConfig", "combine", "combine_partial", "score", "train", "prepare",
    "run_ablation", "run_m_sweep", "run_variant", "VARIANTS", "TreeFlags",
]
