"""Targeted aspect-based multimodal sentiment model on a tape autodiff engine."""

__version__ = "0.1.0"
