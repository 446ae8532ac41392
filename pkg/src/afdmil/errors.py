"""Exception types shared across the package."""


class AfdError(Exception):
    """Base class for all package errors."""


class DimensionError(AfdError, ValueError):
    """Array shapes do not conform for the requested operation."""


class EmptyBagError(AfdError, ValueError):
    """An operation received a bag (or sequence) with no instances."""


class ConfigError(AfdError, ValueError):
    """A configuration value violates its invariants."""


class FormatError(AfdError, ValueError):
    """An on-disk artifact is malformed or inconsistent with its manifest."""


class StateError(AfdError, RuntimeError):
    """An operation was called in an invalid order (e.g. backward before forward)."""


class UndefinedMetricError(AfdError, ValueError):
    """A metric is undefined for the given input (e.g. AUC on one class)."""


class GradCheckError(AfdError, RuntimeError):
    """The gradient check itself is invalid (e.g. non-deterministic forward)."""


class TrainingDivergedError(AfdError, RuntimeError):
    """Training produced a non-finite loss."""
