"""Floor-plan-aided indoor localization with zero-shot transfer across floor plans."""

__version__ = "0.1.0"
