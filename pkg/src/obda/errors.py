"""Error taxonomy shared by the whole package.

Each class carries a distinct process exit code so the CLI can signal the
failure category to callers (scripts, ground-segment schedulers).
"""


class ObdaError(Exception):
    """Base class; exit code 1."""

    exit_code = 1


class InputError(ObdaError):
    """Bad user-supplied data: wrong image dims, missing files, bad boxes."""

    exit_code = 2


class ConfigError(ObdaError):
    """Invalid or inconsistent configuration (shape mismatch, bad variant)."""

    exit_code = 3


class NumericError(ObdaError):
    """Non-finite values produced where finite math was required."""

    exit_code = 4


class IntegrityError(ObdaError):
    """Artifact corruption or cross-config mixing (CRC / hash mismatch)."""

    exit_code = 5


class ProtocolError(ObdaError):
    """Violation of the spatial-shift evaluation contract."""

    exit_code = 6


class GenerationError(ObdaError):
    """Synthetic scene generation could not satisfy its constraints."""

    exit_code = 7


class IngestError(InputError):
    """Malformed external dataset file; message names the offending file."""
