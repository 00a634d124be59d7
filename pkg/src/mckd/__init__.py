"""Meta-learned cross-modal knowledge distillation (MCKD) for missing-modality robustness."""

__version__ = "0.1.0"
