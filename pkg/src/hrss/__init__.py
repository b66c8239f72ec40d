"""Selective state-space scans, deformable aggregation and high-resolution
multi-branch backbones on a float64 numpy tape."""

from .tensor import Tape, Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "no_grad", "__version__"]
