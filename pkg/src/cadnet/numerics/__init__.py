"""Tensor kernels, taped gradients, RMSProp and a finite-difference oracle.

Tensors are plain numpy arrays (float32 by default, float64 for gradient checks).
"""

from cadnet.numerics.autodiff import Tape, Var
from cadnet.numerics.gradcheck import GradcheckReport, gradcheck
from cadnet.numerics.kernels import BACKEND
from cadnet.numerics.ops import activations, check_finite, conv2d_forward, fc_forward
from cadnet.numerics.optim import OptimizerConfig, rmsprop_step
from cadnet.numerics.params import ParameterStore

__all__ = [
    "BACKEND",
    "GradcheckReport",
    "OptimizerConfig",
    "ParameterStore",
    "Tape",
    "Var",
    "activations",
    "check_finite",
    "conv2d_forward",
    "fc_forward",
    "gradcheck",
    "rmsprop_step",
]
