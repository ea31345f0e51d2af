"""Exception hierarchy for LeakGuard.

Every error derives from ``LeakGuardError`` and from the builtin exception that
best describes it, so callers can catch either.
"""

from typing import Any, Optional


class LeakGuardError(Exception):
    """Base class for all LeakGuard errors."""


class BackboneError(LeakGuardError, RuntimeError):
    """The diffusion backbone failed or was misconfigured."""


class UnknownLayerError(LeakGuardError, ValueError):
    """A configured layer id does not exist on the backbone."""


class StepRangeError(LeakGuardError, ValueError):
    """A requested denoising step lies outside the valid range."""


class DimensionMismatchError(LeakGuardError, ValueError):
    """Array or image shapes are incompatible."""


class MissingCaptureError(LeakGuardError, LookupError):
    """A capture needed for localization or replay was not recorded."""


class MultiTokenSubjectError(LeakGuardError, ValueError):
    """A subject text does not map to exactly one token."""


class UnrepresentableSubjectError(LeakGuardError, ValueError):
    """No patch carries the subject, so no representation can be pooled."""


class ImageDecodeError(LeakGuardError, OSError):
    """An image file is missing or cannot be decoded."""


class PromptSetParseError(LeakGuardError, ValueError):
    """A prompt-set line does not match the expected grammar."""

    def __init__(self, line_number: int, line: str, reason: str) -> None:
        self.line_number = line_number
        self.line = line
        self.reason = reason
        super().__init__(f"line {line_number}: {reason}: {line!r}")


class EvaluationError(LeakGuardError, ValueError):
    """An evaluation request is invalid."""


class ServiceRequestError(LeakGuardError, RuntimeError):
    """An external embedding or vision-chat request failed."""


class ExternalGeneratorError(LeakGuardError, RuntimeError):
    """An external generator kept failing during parameter tuning."""

    def __init__(self, message: str, trace: Optional[Any] = None) -> None:
        self.trace = trace
        super().__init__(message)
