from .dataset import SceneDataset, build_splits, collate, load_index, load_meta
from .records import ImageRecord, TrainingExample, filter_instances, tokenize
from .synthetic import make_synthetic_dataset
from .vocab import Vocabulary, build_vocabulary

__all__ = [
    "ImageRecord",
    "SceneDataset",
    "TrainingExample",
    "Vocabulary",
    "build_splits",
    "build_vocabulary",
    "collate",
    "filter_instances",
    "load_index",
    "load_meta",
    "make_synthetic_dataset",
    "tokenize",
]
