"""Online knowledge distillation with asymmetric decision-making.

A numpy autograd engine, small staged convnets, distillation losses
(mutual learning, feature mimicry, consensus and divergence learning),
training loops, interpretability analysis and a command-line driver.
"""

from .losses import DistillConfig
from .nn import Model, ModelSpec, build_model, preset_spec
from .tensor import Tensor, no_grad

__all__ = ["DistillConfig", "Model", "ModelSpec", "Tensor", "build_model", "no_grad", "preset_spec"]
__version__ = "0.1.0"
