"""
Exception hierarchy shared by the learning pipeline, the policy repository and
the enforcement service.
"""
from typing import Optional


class GuardianError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(GuardianError):
    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"Invalid setting '{key}': {message}")
        self.key = key


class TraceFormatError(GuardianError):
    def __init__(self, line: int, field: str, message: str) -> None:
        super().__init__(f"Trace log line {line}, field '{field}': {message}")
        self.line = line
        self.field = field


class SequenceError(GuardianError):
    """Events cannot be assembled into a well-formed execution sequence."""


class LearnError(GuardianError):
    """Policy learning cannot proceed on the given corpus."""


class PolicySchemaError(GuardianError):
    def __init__(self, field: str, message: str, source: Optional[str] = None) -> None:
        where = f" in {source}" if source else ""
        super().__init__(f"Policy field '{field}'{where}: {message}")
        self.field = field
        self.source = source


class RepositoryError(GuardianError):
    """Policy repository load or write failure."""


class AggregatorError(GuardianError):
    """Pattern aggregator failed or timed out."""
