"""Exception hierarchy shared by every stage of the toolkit.

All errors raised on bad data or bad configuration derive from ``LsmError`` so
the command-line front end can map them to a single exit status.
"""


class LsmError(Exception):
    """Base class for data and validation failures."""


class MetadataError(LsmError, ValueError):
    """Sidecar metadata is missing, unreadable or violates a record invariant."""


class TruncationError(LsmError, ValueError):
    """A binary payload does not hold a whole number of records."""


class SpecError(LsmError, ValueError):
    """A synthetic scene specification is invalid."""


class InputTooShortError(LsmError, ValueError):
    """Not enough samples or time slices for the requested transform."""


class EncodeError(LsmError, ValueError):
    """A metadata field cannot be represented in the token vocabulary."""


class DecodeError(LsmError, ValueError):
    """A token sequence is malformed.

    ``offset`` is the index of the offending token inside the sequence and
    ``field`` names the header field (or ``"psd"``) being parsed.
    """

    def __init__(self, message, offset=None, field=None):
        self.offset = offset
        self.field = field
        where = []
        if field is not None:
            where.append(f"field={field}")
        if offset is not None:
            where.append(f"offset={offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ConfigError(LsmError, ValueError):
    """An architecture, training or run configuration is inconsistent."""


class CheckpointError(LsmError):
    """A checkpoint archive is truncated, corrupt or of an unknown version."""


class TrainingError(LsmError, RuntimeError):
    """Optimization diverged (for example a non-finite loss)."""
