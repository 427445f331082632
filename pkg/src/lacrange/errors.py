"""Exception types shared across the package."""


class LaCRangeError(Exception):
    """Base class for all package errors."""


class DimensionError(LaCRangeError, ValueError):
    """Tensor or array shapes are incompatible."""


class ContractError(LaCRangeError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(LaCRangeError, ValueError):
    """A configuration value is invalid."""


class InvalidInputError(LaCRangeError, ValueError):
    """Input data is empty or otherwise unusable."""


class FormatError(LaCRangeError, ValueError):
    """A file does not follow its on-disk format."""


class ConsistencyError(LaCRangeError, ValueError):
    """Two related inputs disagree (e.g. scan and label sizes)."""


class MappingError(LaCRangeError, KeyError):
    """A raw label id has no entry in the label map."""

    def __init__(self, ids):
        self.ids = sorted(int(i) for i in ids)
        super().__init__(f"unmapped raw label ids: {self.ids}")

    def __str__(self):
        return self.args[0]


class ClassRangeError(LaCRangeError, ValueError):
    """A class id is outside [0, num_classes)."""


class UndefinedMetricError(LaCRangeError, ValueError):
    """A metric cannot be computed (e.g. every class is absent)."""


class EmptySetError(LaCRangeError, ValueError):
    """An operation over a set received an empty set."""


class NumericalError(LaCRangeError, FloatingPointError):
    """A NaN or Inf was detected."""
