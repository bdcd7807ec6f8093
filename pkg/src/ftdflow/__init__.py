"""Rectified-flow teachers and one-step students distilled by flow trajectory distillation."""

__version__ = "0.1.0"
