"""Multi-head attention labeller (MHAL) on a small numpy autodiff engine."""

from .corpus import LabelScheme, Sentence, SyntheticSpec, Token, Vocabulary, generate_synthetic, parse_conll
from .model import MHAL, ModelConfig, load_checkpoint, save_checkpoint
from .objectives import LossWeights, total_loss
from .trainer import TrainConfig, evaluate, preset_variant, train

__all__ = [
    "LabelScheme",
    "LossWeights",
    "MHAL",
    "ModelConfig",
    "Sentence",
    "SyntheticSpec",
    "Token",
    "TrainConfig",
    "Vocabulary",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "parse_conll",
    "preset_variant",
    "save_checkpoint",
    "total_loss",
    "train",
]
__version__ = "0.1.0"
