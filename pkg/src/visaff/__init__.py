"""Reliability-gated multimodal emotion recognition in conversation."""

__version__ = "0.1.0"

from .datamodel import Conversation, Dataset, EmotionLabel, Utterance, load_dataset, save_dataset  # noqa: E402
from .estimator import VisaffClassifier  # noqa: E402
from .fusion import FusionOptions, FusionParams, GateTrace, forward_batch  # noqa: E402
from .metrics import BinReport, MetricsReport, bin_by_confidence, seed_average, weighted_f1  # noqa: E402
from .training import TrainConfig, evaluate, train  # noqa: E402

__all__ = [
    "__version__", "Conversation", "Dataset", "EmotionLabel", "Utterance", "load_dataset", "save_dataset",
    "VisaffClassifier", "FusionOptions", "FusionParams", "GateTrace", "forward_batch", "BinReport",
    "MetricsReport", "bin_by_confidence", "seed_average", "weighted_f1", "TrainConfig", "evaluate", "train",
]
