"""Pose-guided motion transfer for sign-language video at desk scale.

A numpy-backed library: autodiff tensor core, thin-plate-spline dense
motion, coarse-motion warping + pose-fusion generator networks, training
losses, video metrics, a deterministic synthetic articulated-signer
dataset, and training/inference drivers.
"""

from .tensor import (
    Tensor,
    NonFiniteError,
    no_grad,
    parameter,
    backward,
    identity_grid,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "NonFiniteError", "no_grad", "parameter",
    "backward", "identity_grid", "__version__",
]
