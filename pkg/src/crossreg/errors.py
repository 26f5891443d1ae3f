"""Exception types shared across the package."""

from __future__ import annotations


class CrossRegError(Exception):
    """Base class for all package-specific errors."""


class FormatError(CrossRegError, ValueError):
    """A file or byte stream does not match its declared layout."""


class PreprocessError(CrossRegError, RuntimeError):
    """A preprocessing stage produced an unusable intermediate.

    ``stage`` names the operation that emptied or rejected the cloud.
    """

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class RegistrationError(CrossRegError, RuntimeError):
    """A registration stage could not produce a transform.

    ``last_transform`` carries the most recent estimate (may be None) so
    callers can inspect partial progress, e.g. after ICP loses track.
    """

    def __init__(self, message: str, last_transform=None, diagnostics: dict | None = None):
        super().__init__(message)
        self.last_transform = last_transform
        self.diagnostics = diagnostics or {}


class BackendError(CrossRegError, RuntimeError):
    """An external registration backend failed (timeout, crash, bad reply).

    ``reason`` is a short machine-readable tag: "timeout", "protocol error",
    or "backend exit".
    """

    def __init__(self, reason: str, message: str):
        super().__init__(message)
        self.reason = reason
