"""Exception types shared across the package.

Each class maps to one failure category surfaced by the public API, so
callers (and the CLI) can tell usage mistakes apart from corrupt inputs
and numerical blow-ups.
"""


class EEGShieldError(Exception):
    """Base class for all package errors."""


class DimensionError(EEGShieldError):
    """Operand shapes are incompatible with the requested operation."""


class LabelError(EEGShieldError):
    """A class/user/session label is outside its declared range."""


class ParameterError(EEGShieldError):
    """A configuration value or argument violates its constraints."""


class ContractError(EEGShieldError):
    """An API precondition was violated (e.g. gradient of a non-scalar)."""


class NumericalError(EEGShieldError):
    """A computation produced NaN/Inf where finite values are required."""


class FormatError(EEGShieldError):
    """A file does not look like the expected container format."""


class CorruptionError(EEGShieldError):
    """A file matches the format but fails checksum/length validation."""


class ValidationError(EEGShieldError):
    """Decoded content violates a declared invariant."""


class ProtocolError(EEGShieldError):
    """An experiment protocol cannot be applied to the given data."""
