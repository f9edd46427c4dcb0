"""Exception hierarchy shared across the package."""


class ClusterSchedError(Exception):
    """Base class for all package errors."""


class InvalidArgument(ClusterSchedError, ValueError):
    pass


class StorageError(ClusterSchedError, OSError):
    """I/O failure while reading or writing index artifacts."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class CorruptionError(StorageError):
    """A file exists but does not match the expected binary layout."""


class ProtocolError(ClusterSchedError, RuntimeError):
    """An event arrived that the receiving state machine does not expect."""


class CacheFullError(ClusterSchedError, RuntimeError):
    """Admission impossible because all resident entries are pinned or protected."""
