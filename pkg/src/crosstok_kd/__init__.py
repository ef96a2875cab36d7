"""Cross-tokenizer knowledge distillation with dual-space losses and cross-model attention."""
from .estimator import CrossTokenizerDistiller

__all__ = ["CrossTokenizerDistiller"]
__version__ = "0.1.0"
