"""NuTrea: tree-search-style message passing for multi-hop KGQA on subgraphs."""
from .data import Dataset, SyntheticConfig, corrupt_kg, generate_splits, load_dataset, write_dataset
from .graph import AugmentedGraph, RelationVocab, SubgraphInstance, augment
from .model import ModelConfig, NuTrea, load_checkpoint, save_checkpoint
from .protocol import run_protocol
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AugmentedGraph", "Dataset", "ModelConfig", "NuTrea", "RelationVocab", "SubgraphInstance",
    "SyntheticConfig", "TrainConfig", "augment", "corrupt_kg", "evaluate", "generate_splits",
    "load_checkpoint", "load_dataset", "run_protocol", "save_checkpoint", "train", "write_dataset",
]
