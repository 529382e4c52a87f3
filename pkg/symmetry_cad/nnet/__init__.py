"""Numpy convolutional networks with hand-written backward passes."""

from symmetry_cad.nnet.checkpoint import load_checkpoint, save_checkpoint
from symmetry_cad.nnet.gradcheck import gradient_check
from symmetry_cad.nnet.network import (
    NetworkSpec,
    Parameters,
    baseline_forward,
    glorot_init,
    loss_and_gradients,
    parameter_count,
    symmetry_forward,
)

__all__ = [
    "NetworkSpec",
    "Parameters",
    "baseline_forward",
    "glorot_init",
    "gradient_check",
    "load_checkpoint",
    "loss_and_gradients",
    "parameter_count",
    "save_checkpoint",
    "symmetry_forward",
]
