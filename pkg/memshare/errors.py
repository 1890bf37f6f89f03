"""
Error hierarchy for memshare.

Every error carries the process exit code the CLI returns for it, so a
failure raised deep inside training or analysis maps onto one documented
code at the command line.
"""

from typing import Any, Dict, Optional


class MemshareError(Exception):
    """Base class for all memshare failures."""

    exit_code = 1


class ConfigurationError(MemshareError, ValueError):
    """Invalid configuration, dimension mismatch or unsatisfiable layout."""

    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class UsageError(MemshareError):
    """An API was called out of order or with a cache it did not produce."""

    exit_code = 2


class BufferNotReady(MemshareError):
    """The replay buffer holds fewer transitions than the requested batch."""

    exit_code = 2

    def __init__(self, size: int, requested: int):
        super().__init__(f"Replay buffer holds {size} transitions, {requested} requested")
        self.size = size
        self.requested = requested


class DegenerateTraceError(MemshareError):
    """A trace has no variance (or too few rows) to decompose."""

    exit_code = 2


class TrainingFault(MemshareError):
    """Non-finite loss or gradient during optimisation."""

    exit_code = 3

    def __init__(self, message: str, diagnostic: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class IncompatibilityError(MemshareError):
    """Checkpoint parameter shapes do not match the requested task."""

    exit_code = 4

    def __init__(self, message: str, expected: Optional[Dict[str, Any]] = None,
                 found: Optional[Dict[str, Any]] = None):
        details = ""
        if expected is not None or found is not None:
            details = f" (expected {expected}, found {found})"
        super().__init__(message + details)
        self.expected = expected or {}
        self.found = found or {}
