"""Exception hierarchy shared by every twinsieve component."""

from __future__ import annotations


class TwinsieveError(Exception):
    """Base class; ``code`` is a short stable identifier for logs and wire frames."""

    code = "error"

    def __init__(self, message: str, *, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ConfigurationError(TwinsieveError, ValueError):
    code = "configuration"


class UsageError(TwinsieveError, ValueError):
    code = "usage"


class RangeError(UsageError):
    code = "range"


class DecodeError(TwinsieveError, ValueError):
    code = "decode"


class IngestError(TwinsieveError, ValueError):
    code = "ingest"


class BundleError(TwinsieveError):
    code = "bundle"


class CorruptBundleError(BundleError):
    code = "corrupt"


class WrongPartyError(BundleError):
    code = "wrong-party"


class MaterialExhaustedError(BundleError):
    code = "exhausted"


class MaterialReusedError(BundleError):
    code = "reused"


class ProtocolError(TwinsieveError):
    code = "protocol"


class PeerTimeoutError(ProtocolError):
    code = "peer-timeout"


class StepMismatchError(ProtocolError):
    code = "step-mismatch"


class SessionAbortError(ProtocolError):
    """The servers refused to deliver a result for a query."""

    code = "abort"

    def __init__(self, phase: str, reason: str):
        super().__init__(f"session aborted during {phase}: {reason}")
        self.phase = phase
        self.reason = reason


class ProtocolAbortError(TwinsieveError):
    """Client-side view of a server abort."""

    code = "protocol-abort"

    def __init__(self, phase: str, reason: str, party: int | None = None):
        who = f"server {party}" if party is not None else "server"
        super().__init__(f"{who} aborted the query during {phase}: {reason}")
        self.phase = phase
        self.reason = reason
        self.party = party


class ServerInconsistencyError(TwinsieveError):
    code = "inconsistent"


class TransportError(TwinsieveError, ConnectionError):
    code = "transport"
