"""Exception taxonomy shared by every module.

The CLI maps these onto process exit codes (see cli.py): config problems
exit 2, checkpoint lineage/integrity problems exit 3, numeric failures
exit 4.
"""


class FlowCacheError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(FlowCacheError):
    """An argument or state violated a documented precondition."""


class NumericFailure(FlowCacheError):
    """A computation produced non-finite values; message names the site."""


class CacheMissError(FlowCacheError):
    """A prediction strategy was asked to read an uninitialized cache."""


class ConfigError(FlowCacheError):
    """An experiment config file is malformed or inconsistent."""


class CheckpointError(FlowCacheError):
    """Base class for checkpoint load/save problems."""


class CorruptCheckpointError(CheckpointError):
    """Digest mismatch, truncation, or bad magic while loading."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format_version is not supported by this build."""


class LineageError(CheckpointError):
    """Checkpoint parentage does not respect the fixed pipeline order."""
