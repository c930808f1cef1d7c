"""Device-robust acoustic scene classification with residual frequency normalization.

A small numpy toolkit: autodiff tensors, a log-mel front-end, the
BC-ResNet-Mod network, its training recipe, compression to a packed
int8 model and a synthetic multi-device benchmark.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad_check, no_grad
from .normalization import freq_in, res_norm
from .model import ModelConfig, build, count_params, receptive_field

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad",
    "freq_in", "res_norm",
    "ModelConfig", "build", "count_params", "receptive_field",
]
