"""Exception and warning types shared across the package."""

from __future__ import annotations


class ReflexEditError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ReflexEditError):
    """A config, request, or override failed validation.

    Messages name the offending field and the violated constraint.
    """


class TensorFormatError(ReflexEditError):
    """A tensor container is malformed; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DimensionError(ReflexEditError):
    """Array shapes are incompatible with the requested operation."""


class MappingError(ReflexEditError):
    """A token mapping is inconsistent with the attention blocks it is applied to."""


class CaptureError(ReflexEditError):
    """Feature capture did not produce events for a configured layer."""


class InjectionError(ReflexEditError):
    """A hook override does not match the tensor it replaces."""


class MaskError(ReflexEditError):
    """Mask generation or application received invalid inputs."""


class BlendError(ReflexEditError):
    """Latent blending inputs disagree in shape or step tag."""


class CodecError(ReflexEditError):
    """Image encode/decode received a shape the codec cannot handle."""


class BackendSpecError(ReflexEditError):
    """A backend spec violates its structural constraints."""


class MetricError(ReflexEditError):
    """A metric was evaluated on degenerate inputs (e.g. an empty mask)."""


class ManifestError(ReflexEditError):
    """A benchmark manifest is malformed; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NumericError(ReflexEditError):
    """A numeric evaluation produced non-finite values."""


class StepLookupError(ReflexEditError):
    """A trajectory does not contain the requested step."""


class ReflexEditWarning(UserWarning):
    """Diagnostic emitted when an operation hits a defined degenerate case."""
