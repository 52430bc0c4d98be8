"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class FedGraphError(Exception):
    """Base class for all package errors."""


class FormatError(FedGraphError):
    """A dataset file could not be parsed."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class IntegrityError(FedGraphError):
    """Parsed data violates a structural invariant (self-loop, dangling id, ...)."""


class ConfigurationError(FedGraphError):
    pass


class KernelError(FedGraphError):
    """Shape or value problem inside a numeric kernel op."""


class ModelError(FedGraphError):
    pass


class OptimizerError(FedGraphError):
    pass


class FederationError(FedGraphError):
    pass


class ScoreError(FedGraphError):
    pass


class MetricsError(FedGraphError):
    pass


class ReportError(FedGraphError):
    pass


class StageError(FedGraphError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
