"""Context-aware memory for paragraph-level token LMs, on a numpy autodiff engine."""
from .corpus import CorpusConfig, make_dataset
from .lm import LmConfig
from .pipeline import build_models, context_cost, synthesize_paragraph, train_paragraph
from .tensor import Tensor

__all__ = ["CorpusConfig", "LmConfig", "Tensor", "build_models", "context_cost", "make_dataset",
           "synthesize_paragraph", "train_paragraph"]
__version__ = "0.1.0"
