"""Deep temporal clustering of gridded spatiotemporal data."""

from .autodiff import Tape, Tensor, backward, grad_check
from .cluster_eval import MetricReport, elbow_k, evaluate_internal, hac_cluster, kmeans_cluster
from .data import GridDataset, ingest_grid, preprocess, to_sequence_tensor
from .estimators import BTGATClusterer, GridPreprocessor, HACClusterer, KMeansClusterer
from .model import ModelConfig, forward, init_model, load_checkpoint, save_checkpoint
from .synth import RegimeSpec, adjusted_rand_index, generate
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BTGATClusterer",
    "GridDataset",
    "GridPreprocessor",
    "HACClusterer",
    "KMeansClusterer",
    "MetricReport",
    "ModelConfig",
    "RegimeSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "adjusted_rand_index",
    "backward",
    "elbow_k",
    "evaluate_internal",
    "forward",
    "generate",
    "grad_check",
    "hac_cluster",
    "ingest_grid",
    "init_model",
    "kmeans_cluster",
    "load_checkpoint",
    "preprocess",
    "save_checkpoint",
    "to_sequence_tensor",
    "train",
]
