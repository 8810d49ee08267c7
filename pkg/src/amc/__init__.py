"""Attention-based multi-modal correlation model for query-image ranking."""

from .data import DatasetBundle, SynthSpec, generate_synthetic, load_bundle, write_bundle
from .model import AmcHyperparams, AmcParams, init_params, load_checkpoint, save_checkpoint, score
from .training import TrainConfig, train

__all__ = [
    "AmcHyperparams", "AmcParams", "DatasetBundle", "SynthSpec", "TrainConfig",
    "generate_synthetic", "init_params", "load_bundle", "load_checkpoint",
    "save_checkpoint", "score", "train", "write_bundle",
]
