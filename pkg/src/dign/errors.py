"""Exception taxonomy shared across the package."""


class DignError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DignError):
    """Tensor extents are inconsistent with the requested operation."""


class ContractError(DignError):
    """An argument violates a documented precondition (non-binary mask,
    non-scalar loss, all-zero loss weights, ...)."""


class GraphStateError(DignError):
    """The operation graph is in the wrong state, e.g. backward called twice."""


class ConstructionError(DignError):
    """A layer or network specification cannot be realized."""


class GenerationError(DignError):
    """Mask generation could not satisfy its configuration."""


class TrainingError(DignError):
    """The training loop hit a fatal condition (non-finite loss/gradient)."""


class IncompatibilityError(DignError):
    """A checkpoint does not match the configuration it is loaded into."""


class ParseError(DignError):
    """A config or checkpoint file is malformed or truncated."""
