"""
Exception hierarchy shared by every module.

Each error carries the process exit code the command line maps it to.
"""

from typing import Optional


class LitmasError(Exception):
    """Base class for all errors raised by this package."""

    exit_code: int = 1


class ConfigError(LitmasError):
    """Invalid or missing configuration value."""

    exit_code = 2


class ContractError(LitmasError):
    """A documented precondition of an operation was violated."""

    exit_code = 2


class DimensionError(ContractError, ValueError):
    """Tensor or feature dimensions do not line up."""


class BatchError(ContractError):
    """A batch cannot produce a loss (no eligible modality)."""


class ParseError(LitmasError):
    """Malformed text input; carries the offending line number."""

    exit_code = 2

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}"
        if line is not None:
            location = f"{location}:{line}" if location else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)
        self.path = path
        self.line = line


class CheckpointError(LitmasError):
    """Checkpoint cannot be used for the requested purpose."""

    exit_code = 2


class CorruptCheckpointError(CheckpointError):
    """Checkpoint bytes are truncated or fail the integrity digest."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported container version."""


class TdcfParameterError(ConfigError):
    """t-DCF parameters produce a degenerate cost function."""


class ArtifactIOError(LitmasError):
    """Reading or writing an artifact file failed."""

    exit_code = 3


class DivergenceError(LitmasError):
    """Training produced a non-finite loss, gradient or parameter."""

    exit_code = 4


class NonFiniteError(DivergenceError):
    """A forward op produced NaN or Inf from finite inputs."""


class DegenerateEmbeddingError(DivergenceError):
    """An embedding or center has (near) zero norm, cosine is undefined."""


class MetricUndefinedError(LitmasError):
    """A metric needs both bonafide and spoof scores."""

    exit_code = 5
