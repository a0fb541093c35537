from . import functional
from .gradcheck import check_gradients, numerical_grad, relative_error
from .nn import Conv2d, DWConv2d, LayerNorm, Linear, Module, Parameter
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, default_dtype, no_grad, precision

__all__ = [
    "Adam",
    "AdamState",
    "Conv2d",
    "DWConv2d",
    "LayerNorm",
    "Linear",
    "Module",
    "Parameter",
    "Tensor",
    "adam_step",
    "as_tensor",
    "check_gradients",
    "default_dtype",
    "functional",
    "no_grad",
    "numerical_grad",
    "precision",
    "relative_error",
]
