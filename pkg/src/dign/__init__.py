"""dign: an image inpainting engine built from scratch on numpy.

Partial-convolution U-net with inception-style multi-branch layers,
trained by a tape-based autodiff core that lives in this package. No
deep-learning framework underneath.
"""

__version__ = "0.1.0"

from .errors import (ConstructionError, ContractError, DignError,
                     GenerationError, GraphStateError, IncompatibilityError,
                     ParseError, ShapeError, TrainingError)
from .tensor import OpGraph, Tensor, backward, constant, elementwise, tensor_new

__all__ = [
    "ConstructionError", "ContractError", "DignError", "GenerationError",
    "GraphStateError", "IncompatibilityError", "ParseError", "ShapeError",
    "TrainingError",
    "OpGraph", "Tensor", "backward", "constant", "elementwise", "tensor_new",
    "__version__",
]
