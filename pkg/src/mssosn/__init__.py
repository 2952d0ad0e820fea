"""Multi-scale second-order similarity network for few-shot classification, on numpy."""

from .config import TrainConfig, load_config, parse_config
from .data import Dataset, Episode, load_dataset, sample_episode, split_dataset, synth_generate
from .model import MsSoSN, accuracy, total_loss
from .rng import SplitMix64
from .train import evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "Dataset", "Episode", "MsSoSN", "SplitMix64", "TrainConfig", "accuracy", "evaluate",
    "load_checkpoint", "load_config", "load_dataset", "parse_config", "sample_episode",
    "save_checkpoint", "split_dataset", "synth_generate", "total_loss", "train",
]
