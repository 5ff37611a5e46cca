from . import functional
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .optim import OptimizerState, sgd_step
from .spectrum import covariance_spectrum
from .tensor import Tensor, as_tensor, backward, parameter, tensor

__all__ = [
    "Tensor", "tensor", "parameter", "as_tensor", "backward", "functional",
    "OptimizerState", "sgd_step", "covariance_spectrum",
    "check_gradients", "numerical_gradient", "relative_error",
]
