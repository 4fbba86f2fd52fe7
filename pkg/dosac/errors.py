"""Exceptions raised by the package.

Every error derives from :class:`DoSACError` and from the closest builtin exception, so callers
may catch either.
"""

import typing


class DoSACError(Exception):
    """Base class of all package errors."""

    pass


class CapacityError(DoSACError, MemoryError):
    """An exact enumeration would exceed the joint capacity guard."""

    pass


class ConditioningError(DoSACError, ValueError):
    """Conditioning on an event of probability zero."""

    pass


class NoPastError(DoSACError, ValueError):
    """A backdoor adjustment was requested at a step that has no previous step."""

    pass


class ParameterError(DoSACError, ValueError):
    """A numeric parameter is outside of its valid range."""

    pass


class ShapeError(DoSACError, ValueError):
    """Array or tensor shapes do not match."""

    pass


class NumericError(DoSACError, ArithmeticError):
    """Non-finite values, or a value at which a density diverges."""

    pass


class DeterminismError(DoSACError, RuntimeError):
    """A function that must be deterministic returned different values for the same input."""

    pass


class ReplayError(DoSACError, ValueError):
    """Invalid replay record or a buffer too small for the requested batch."""

    pass


class CheckpointError(DoSACError, RuntimeError):
    """A checkpoint is missing, unreadable, or written by an incompatible format version."""

    pass


class ConfigError(DoSACError, ValueError):
    """An invalid run configuration.

    :param violations: One message per violated field.
    """

    def __init__(self, violations: typing.Union[str, typing.List[str]]):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("Invalid configuration:\n" + "\n".join(f"  - {v}" for v in self.violations))


__all__ = [
    "DoSACError",
    "CapacityError",
    "ConditioningError",
    "NoPastError",
    "ParameterError",
    "ShapeError",
    "NumericError",
    "DeterminismError",
    "ReplayError",
    "CheckpointError",
    "ConfigError",
]
