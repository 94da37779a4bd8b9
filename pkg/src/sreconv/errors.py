"""Exception hierarchy.

Every error carries a short ``kind`` string so the CLI can emit a
machine-readable error document without string matching.
"""


class SreError(Exception):
    kind = "error"


class ShapeError(SreError, ValueError):
    kind = "shape-error"


class NonFiniteError(SreError, FloatingPointError):
    kind = "non-finite"


class InvalidKernelSizeError(SreError, ValueError):
    kind = "invalid-kernel-size"


class ConfigError(SreError, ValueError):
    kind = "config-error"


class CacheError(SreError, RuntimeError):
    kind = "cache-error"


class StaleCacheError(CacheError):
    kind = "stale-cache"


class CheckpointError(SreError):
    kind = "checkpoint-error"


class BadMagicError(CheckpointError):
    kind = "bad-magic"


class VersionMismatchError(CheckpointError):
    kind = "version-mismatch"


class TruncatedCheckpointError(CheckpointError):
    kind = "truncated"


class ConfigMismatchError(CheckpointError):
    kind = "config-mismatch"


class NpyError(SreError, ValueError):
    kind = "npy-error"


class NpyBadMagicError(NpyError):
    kind = "npy-bad-magic"


class NpyHeaderError(NpyError):
    kind = "npy-bad-header"


class NpyUnsupportedDtypeError(NpyError):
    kind = "npy-unsupported-dtype"


class NpyLengthMismatchError(NpyError):
    kind = "npy-length-mismatch"


class ArchiveError(SreError, ValueError):
    kind = "archive-error"


class MissingKeyError(ArchiveError, KeyError):
    kind = "missing-key"


class DatasetNotFoundError(SreError, FileNotFoundError):
    kind = "dataset-not-found"


class LabelError(SreError, ValueError):
    kind = "label-error"


class UnsupportedProtocolError(SreError, ValueError):
    kind = "unsupported-protocol"


class PgmError(SreError, ValueError):
    kind = "bad-pgm"
