"""Custom exception hierarchy for the neurodecode pipeline."""

from __future__ import annotations

EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_NUMERIC = 4


class AppError(Exception):
    """Base pipeline error with a stable machine-readable code."""

    def __init__(self, message: str, code: str, exit_code: int = EXIT_CONFIG) -> None:
        self.message = message
        self.code = code
        self.exit_code = exit_code
        super().__init__(message)

    def to_dict(self) -> dict[str, str]:
        """Serialize the error in the CLI standard shape."""
        return {"error": self.message, "code": self.code}


class ConfigError(AppError):
    """Raised when a configuration value or combination is invalid."""

    def __init__(self, reason: str) -> None:
        super().__init__(message=reason, code="CONFIG_ERROR", exit_code=EXIT_CONFIG)


class DimensionError(AppError):
    """Raised when tensor shapes do not line up."""

    def __init__(self, reason: str) -> None:
        super().__init__(message=reason, code="DIMENSION_ERROR", exit_code=EXIT_CONFIG)


class CrossValidationError(AppError):
    """Raised when a cross-validation scheme cannot be built from the data."""

    def __init__(self, reason: str) -> None:
        super().__init__(message=reason, code="CV_ERROR", exit_code=EXIT_CONFIG)


class UntrainedModelError(AppError):
    """Raised when an operation needs a trained model but got a fresh one."""

    def __init__(self, model: str) -> None:
        super().__init__(
            message=f"{model} is untrained; train it or load a checkpoint first",
            code="UNTRAINED_MODEL",
            exit_code=EXIT_CONFIG,
        )


class MissingArtifactError(AppError):
    """Raised when an upstream artifact has not been produced yet."""

    def __init__(self, artifact: str, producer: str) -> None:
        self.artifact = artifact
        self.producer = producer
        super().__init__(
            message=f"Missing artifact {artifact}; run `neurodecode {producer}` first",
            code="MISSING_ARTIFACT",
            exit_code=EXIT_MISSING_ARTIFACT,
        )


class NumericError(AppError):
    """Raised when a computation produces non-finite or undefined values."""

    def __init__(self, reason: str) -> None:
        super().__init__(message=reason, code="NUMERIC_ERROR", exit_code=EXIT_NUMERIC)


class SolverError(AppError):
    """Raised when a linear system is singular or rank deficient."""

    def __init__(self, reason: str, deficient_columns: int = 0) -> None:
        self.deficient_columns = deficient_columns
        super().__init__(message=reason, code="SOLVER_ERROR", exit_code=EXIT_NUMERIC)


class UndefinedCorrelationError(AppError):
    """Raised when a correlation-type metric has a zero-variance argument."""

    def __init__(self, reason: str) -> None:
        super().__init__(message=reason, code="UNDEFINED_CORRELATION", exit_code=EXIT_NUMERIC)
