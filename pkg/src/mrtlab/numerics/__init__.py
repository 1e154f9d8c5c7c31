from . import autograd as ag
from .autograd import Tensor, no_grad
from .gradcheck import CheckReport, finite_diff_grad, grad_check, value_and_grad
from .optim import Adam, inverse_sqrt_lr
from .params import GradBundle, ParamStore, backward, from_bytes, load_params, save_params, to_bytes
from .rng import Rng

__all__ = [
    "ag",
    "Tensor",
    "no_grad",
    "CheckReport",
    "finite_diff_grad",
    "grad_check",
    "value_and_grad",
    "Adam",
    "inverse_sqrt_lr",
    "GradBundle",
    "ParamStore",
    "backward",
    "from_bytes",
    "load_params",
    "save_params",
    "to_bytes",
    "Rng",
]
