"""Volumetric synaptic-cleft detection toolkit.

A desk-scale dense-prediction stack: a recorded-operation tensor core with
reverse-mode gradients, resizing attention blocks with a learnable query,
boundary-distance label augmentation with a three-term loss, a U-Net-shaped
model, Adam training, and CREMI-style evaluation.
"""

from .autodiff import Parameter, Tape, grad_check
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "Parameter", "grad_check", "__version__"]
