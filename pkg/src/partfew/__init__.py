"""Part-based self-supervised pretraining and part-augmented few-shot
classification, with an episodic evaluation harness."""

from .config import RunConfig, default_config, load_config
from .data import DatasetHandle, ViewSet, generate_views, load_dataset
from .encoder import Encoder, build_encoder, momentum_update
from .discovery import NegativeQueue, contrastive_loss, pretrain, select_discriminative_part
from .augment import LinearClassifier, augment_and_refine
from .episodes import Episode, EvalReport, confidence_interval, evaluate, sample_episode

__all__ = [
    "RunConfig",
    "default_config",
    "load_config",
    "DatasetHandle",
    "ViewSet",
    "generate_views",
    "load_dataset",
    "Encoder",
    "build_encoder",
    "momentum_update",
    "NegativeQueue",
    "contrastive_loss",
    "pretrain",
    "select_discriminative_part",
    "LinearClassifier",
    "augment_and_refine",
    "Episode",
    "EvalReport",
    "confidence_interval",
    "evaluate",
    "sample_episode",
]

__version__ = "0.1.0"
