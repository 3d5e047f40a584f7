"""Exception types shared across the package."""
from .tensor import ContractError, DimensionError, NumericError


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Dataset contents violate a precondition (labels, sampler contract)."""


class EvaluationError(RuntimeError):
    """Retrieval evaluation cannot produce a report."""


__all__ = ["ConfigError", "DataError", "EvaluationError", "ContractError", "DimensionError", "NumericError"]
