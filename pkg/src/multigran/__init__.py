"""Multi-granularity text detection (word, line, paragraph, page) with
prompt-conditioned instance segmentation, at toy scale on a synthetic corpus."""

from .corpus import CorpusConfig, Granularity, SampleRecord, TextInstance, generate_corpus
from .estimator import MultiGranularityDetector
from .evaluation import EvalReport, evaluate
from .model import ModelConfig, MultiGranularityNet
from .trainer import TrainConfig, train_det, train_seg

__version__ = "0.1.0"

__all__ = [
    "CorpusConfig",
    "EvalReport",
    "Granularity",
    "ModelConfig",
    "MultiGranularityDetector",
    "MultiGranularityNet",
    "SampleRecord",
    "TextInstance",
    "TrainConfig",
    "evaluate",
    "generate_corpus",
    "train_det",
    "train_seg",
]
