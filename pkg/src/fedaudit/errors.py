"""Exception types shared across the package."""


class FedAuditError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(FedAuditError, ValueError):
    """Operands have incompatible dimensions."""


class EmptySampleError(FedAuditError, ValueError):
    """An operation that needs at least one sample received none."""


class DegenerateDistributionError(FedAuditError, ValueError):
    """A distribution parameter (e.g. variance) is not strictly positive."""


class ZeroVectorError(FedAuditError, ValueError):
    """A zero-norm operand where a direction is required (zero gradient)."""


class ParameterError(FedAuditError, ValueError):
    """A numeric parameter is outside its admissible range."""


class ConfigError(FedAuditError, ValueError):
    """Invalid or inconsistent configuration."""


class InsufficientDataError(FedAuditError, ValueError):
    """Not enough samples to satisfy the requested partition."""


class InsufficientClientsError(FedAuditError, ValueError):
    """Fewer clients than the attack statistics require."""


class DataFormatError(FedAuditError, ValueError):
    """A data file could not be parsed; the message names the line."""


class CohortError(FedAuditError, ValueError):
    """A scored cohort is missing one of the two classes."""


class ReferencePointError(FedAuditError, ValueError):
    """A point is not dominated by the hypervolume reference point."""


class ContractError(FedAuditError, ValueError):
    """Two artifacts that must agree (e.g. on a threshold) do not."""


class IntegrityError(FedAuditError, RuntimeError):
    """A persisted artifact is missing, truncated, or inconsistent."""
