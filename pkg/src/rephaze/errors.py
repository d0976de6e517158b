"""Exception hierarchy shared by every module.

The CLI maps these onto stable exit codes, so new failure modes should
reuse one of the classes below instead of raising bare ValueErrors.
"""


class RephazeError(Exception):
    """Base class for all library errors."""


class ShapeError(RephazeError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(RephazeError, ValueError):
    """An input violates a documented precondition (sizes, ranges, modes)."""


class ConfigError(RephazeError, ValueError):
    """A parameter set or configuration cannot be constructed as requested."""


class StateError(RephazeError, RuntimeError):
    """The object is in the wrong state for this operation (e.g. fusing twice)."""


class NumericError(RephazeError, ArithmeticError):
    """A non-finite value was produced where finiteness is required."""
