from __future__ import annotations


class TrustPrefError(Exception):
    exit_code = 1

    def __init__(self, message: str | None = None) -> None:
        self.message = message or self.__class__.__name__
        super().__init__(self.message)


class ConfigurationError(TrustPrefError, ValueError):
    exit_code = 2


class DataError(TrustPrefError, ValueError):
    exit_code = 3


class RejectedInputError(DataError):
    """Input with the wrong shape for the model or dataset."""


class NumericDivergenceError(TrustPrefError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str | None = None, iteration: int | None = None) -> None:
        super().__init__(message)
        self.iteration = iteration


class PartialSweepFailureError(TrustPrefError):
    exit_code = 5

    def __init__(self, message: str | None = None, failed: list[str] | None = None) -> None:
        super().__init__(message)
        self.failed = failed or []
