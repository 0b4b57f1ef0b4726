"""Offline exporter: runs frozen dual-encoder and pair-scoring teachers over
an image-caption dataset and emits the engine's binary wire formats."""

from .backends import ToyBackend
from .datasets import FolderDataset, make_toy_dataset, write_dataset_folder
from .export import export_dual, export_pairs, export_raw_features

__version__ = "0.1.0"
