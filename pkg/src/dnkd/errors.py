"""Exception hierarchy shared by every module.

The CLI maps each family to its own exit code, so new errors should
subclass the closest family rather than ``DnkdError`` directly.
"""


class DnkdError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"


class InvalidArgument(DnkdError, ValueError):
    code = "invalid_argument"


class DimensionMismatch(InvalidArgument):
    code = "dimension_mismatch"


class VocabRangeError(InvalidArgument):
    code = "vocab_range"


class DuplicateOrigin(InvalidArgument):
    code = "duplicate_origin"


class EmptyDatastore(DnkdError):
    code = "empty_datastore"


class EmptyNeighborSet(InvalidArgument):
    code = "empty_neighbor_set"


class MissingInput(DnkdError):
    """A required artifact (file, cache, teacher input) is absent."""

    code = "missing_input"


class ConfigError(DnkdError):
    code = "config_error"


class TrainingDiverged(DnkdError):
    code = "diverged"


class FormatError(DnkdError):
    """Base class for binary file decoding failures."""

    code = "format_error"


class BadMagic(FormatError):
    code = "bad_magic"


class VersionMismatch(FormatError):
    code = "version_mismatch"


class TruncatedFile(FormatError):
    code = "truncated_file"


class ChecksumError(FormatError):
    """CRC failure, or a provenance checksum that does not match its input."""

    code = "checksum_mismatch"
