"""Exception hierarchy shared by the library, the CLI and the HTTP app.

Every error carries a ``detail`` payload shaped like the JSON error bodies the API
returns (``{"error": ..., "message": ...}``) and the process exit code the CLI uses.
"""

from typing import Any, Dict, Optional


class NaimError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3
    error = "Internal error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    @property
    def detail(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"error": self.error, "message": self.message}
        if self.context:
            payload["context"] = self.context
        return payload


class UsageError(NaimError):
    exit_code = 1
    error = "Invalid usage"


# Data errors (exit 2)


class DataError(NaimError):
    exit_code = 2
    error = "Data error"


class SchemaError(DataError):
    error = "Schema mismatch"


class ParseError(DataError):
    error = "Parse error"

    def __init__(self, message: str, line: Optional[int] = None, **context: Any):
        super().__init__(message, line=line, **context)
        self.line = line


class SplitError(DataError):
    error = "Split error"


class InjectionError(DataError):
    error = "Missingness injection failed"


# Numeric failures (exit 3)


class NumericError(NaimError):
    exit_code = 3
    error = "Numeric failure"


class DimensionError(NumericError, ValueError):
    error = "Dimension mismatch"


class NonFiniteError(NumericError):
    error = "Non-finite value"


class ContractError(NumericError):
    error = "Contract violation"


class OptimizerError(NumericError):
    error = "Optimizer failure"


class TrainingDivergedError(NumericError):
    error = "Training diverged"

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message, epoch=epoch, batch=batch)
        self.epoch = epoch
        self.batch = batch


class MetricError(NumericError, ValueError):
    error = "Metric undefined"


class StatisticalTestError(NumericError, ValueError):
    error = "Statistical test undefined"


class ModelInputError(NumericError, ValueError):
    error = "Invalid model input"


class EmbeddingIndexError(NumericError, IndexError):
    error = "Embedding index out of range"


class LabelIndexError(NumericError, IndexError):
    error = "Label out of range"
