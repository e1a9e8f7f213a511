"""Dynamic skip connections for U-style segmentation networks, from scratch.

A kernel-selection module picks depthwise convolution kernels from global
context, and a test-time-training module refines features by running one
inner gradient step per spatial token, in training and inference alike.
Everything rides on a small numpy-backed tensor library with reverse-mode
differentiation, verified against finite differences and brute-force
oracles.
"""

from .tensor import Tensor, broadcast_binary, concat, matmul, no_grad, split
from .autodiff import GradCheckReport, grad_check
from .tensorfile import read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "broadcast_binary",
    "concat",
    "matmul",
    "no_grad",
    "split",
    "GradCheckReport",
    "grad_check",
    "read_tensor",
    "write_tensor",
    "__version__",
]
