"""2.5D volume classification: slice-wise 2D features pooled by multihead attention."""
from .kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor, backward, default_dtype, grad_check, no_grad

__version__ = "0.1.0"
