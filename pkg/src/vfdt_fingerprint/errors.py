"""Exception hierarchy.

``ValidationError`` covers bad arguments and violated preconditions (CLI exit
code 1); ``DataError`` covers malformed files and degenerate data discovered at
run time (CLI exit code 2).
"""


class FingerprintError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(FingerprintError, ValueError):
    """An argument or configuration violates a documented precondition."""


class DataError(FingerprintError):
    """Input data is malformed or unusable."""


class FormatError(DataError):
    """A binary sample file has an invalid layout."""


class MetadataError(DataError):
    """A JSON sidecar is missing or invalid."""


class EmptyTraceError(ValidationError):
    """A signal is too short to produce a single VFDT window."""


class CapacityError(ValidationError):
    """A request exceeds what the generator can satisfy."""
