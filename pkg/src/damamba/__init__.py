"""Dialogue-aware hybrid chunked-attention / state-space engagement estimator."""

__version__ = "0.1.0"
