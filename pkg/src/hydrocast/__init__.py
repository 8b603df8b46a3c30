"""hydrocast: daily runoff forecasting with a learnable trend/seasonal/residual
split, a five-expert residual ensemble fused by a hydrologic-context gate, and
a semi-supervised multi-task training objective."""

__version__ = "0.1.0"

from .autodiff import Tensor, tensor, no_grad

__all__ = ["Tensor", "tensor", "no_grad", "__version__"]
