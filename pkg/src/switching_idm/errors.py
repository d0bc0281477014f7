"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so keep the split coarse:
bad arguments, bad data, numeric failures, and inference-time failures.
"""


class SwitchingIdmError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SwitchingIdmError, ValueError):
    """A caller-supplied argument violates a documented precondition."""


class SchemaError(SwitchingIdmError):
    """An input file is missing required columns or the mapping is unusable."""


class DataError(SwitchingIdmError):
    """Input data violates an invariant (non-finite values, bad ordering, ...)."""


class NumericDomainError(SwitchingIdmError, ValueError):
    """A numeric operation left its valid domain (e.g. non-SPD matrix)."""


class InferenceError(SwitchingIdmError):
    """The sampler cannot proceed (e.g. a time step no state can explain)."""
