"""Error taxonomy shared by every module.

Each class maps to one failure family so the CLI can emit a stable,
machine-readable error label.
"""


class MtdistillError(Exception):
    """Base class for all engine errors."""

    label = "error"


class ContractError(MtdistillError):
    """A caller violated an operation's precondition (shape, range, domain)."""

    label = "contract"


class NumericError(MtdistillError):
    """A computation produced non-finite values or diverged."""

    label = "numeric"


class IngestionError(MtdistillError):
    """An id referenced by a batch is missing from the loaded teacher data."""

    label = "ingestion"


class CoverageError(MtdistillError):
    """A table-backed pair oracle is missing a required (image, text) pair."""

    label = "coverage"


class ConfigError(MtdistillError):
    """A run configuration is invalid or internally inconsistent."""

    label = "config"


class FormatError(MtdistillError):
    """A data file is malformed (bad magic, version, or field values)."""

    label = "format"


class GenerationError(MtdistillError):
    """Synthetic world generation could not satisfy its quality checks."""

    label = "generation"
