"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from .tensor import Parameter, Tape, Tensor, backward, checked

__all__ = ["Parameter", "Tape", "Tensor", "backward", "checked"]
