"""Exception types shared across the engine."""


class TaurusError(Exception):
    pass


class DimensionMismatch(TaurusError, ValueError):
    """Two LSN Vectors of different length were combined (engine misconfiguration)."""


class CorruptRecord(TaurusError):
    pass


class NoSuchRow(TaurusError, KeyError):
    pass


class DuplicateKey(TaurusError):
    pass


class TxnAborted(TaurusError):
    """Raised inside a transaction body; the caller retries the whole transaction."""

    def __init__(self, reason: str = "conflict"):
        super().__init__(reason)
        self.reason = reason


class UserAbort(TxnAborted):
    """Abort requested by the stored procedure itself (e.g. TPC-C invalid item)."""

    def __init__(self, reason: str = "user"):
        super().__init__(reason)


class EngineStopped(TaurusError):
    pass


class LogFailure(TaurusError):
    """An I/O error put a log stream into fail-stop mode."""


class ReplayError(TaurusError):
    """Command re-execution hit state that cannot exist under a correct replay order."""


class ManifestMismatch(TaurusError):
    pass
