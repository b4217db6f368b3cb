"""Rectified flow, reflow and one-step distillation on synthetic conditional data."""

__version__ = "0.1.0"
