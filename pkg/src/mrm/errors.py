"""Exception hierarchy shared by the daemon, the client SDK and the tools.

Every application error carries a stable :class:`ErrorCode` so it can be
shipped over the wire and re-raised on the other side.
"""

from __future__ import annotations

import enum


class ErrorCode(enum.IntEnum):
    # Numeric values are part of the wire ABI. Never renumber.
    NOT_FOUND = 1
    TOO_LARGE_FOR_FAST = 2
    NO_EVICTABLE_SPACE = 3
    NOT_OPEN = 4
    CORRUPT = 5
    PROTOCOL_ERROR = 6
    INTERNAL = 7


class MRMError(Exception):
    code: ErrorCode = ErrorCode.INTERNAL


class ConfigError(MRMError, ValueError):
    pass


# -- model database / placement ---------------------------------------------

class NotFound(MRMError, LookupError):
    code = ErrorCode.NOT_FOUND


class TooLargeForFast(MRMError):
    code = ErrorCode.TOO_LARGE_FOR_FAST


class NoEvictableSpace(MRMError):
    code = ErrorCode.NO_EVICTABLE_SPACE


class NotOpen(MRMError):
    code = ErrorCode.NOT_OPEN


class UnknownModel(NotOpen, LookupError):
    pass


# -- artifact format ----------------------------------------------------------

class LengthMismatch(MRMError, ValueError):
    """Tensor data handed to the serializer disagrees with its spec."""


class CorruptArtifact(MRMError):
    code = ErrorCode.CORRUPT


class BadMagic(CorruptArtifact):
    pass


class UnsupportedVersion(CorruptArtifact):
    pass


class CorruptManifest(CorruptArtifact):
    pass


class ChecksumMismatch(CorruptArtifact):
    pass


# -- shared segments ----------------------------------------------------------

class SegmentError(MRMError):
    pass


class NameCollision(SegmentError):
    pass


class OutOfSharedMemory(SegmentError):
    pass


class AlreadySealed(SegmentError):
    pass


class NotSealed(SegmentError):
    pass


class NoSuchSegment(SegmentError, LookupError):
    pass


class StaleGeneration(SegmentError):
    pass


# -- wire protocol ------------------------------------------------------------

class ProtocolError(MRMError):
    code = ErrorCode.PROTOCOL_ERROR


class FrameTooLarge(ProtocolError):
    pass


class UnknownMessageType(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class ConnectionLost(MRMError, ConnectionError):
    pass


class DaemonUnreachable(MRMError, ConnectionError):
    pass


class RemoteError(MRMError):
    """Raised by the client when the daemon answers with an error frame."""

    def __init__(self, code: ErrorCode, detail: str):
        super().__init__(f"{code.name}: {detail}")
        self.code = code
        self.detail = detail


# -- remote store -------------------------------------------------------------

class RemoteNotFound(NotFound):
    pass


class TransportError(MRMError, OSError):
    pass


_BY_CODE = {
    ErrorCode.NOT_FOUND: NotFound,
    ErrorCode.TOO_LARGE_FOR_FAST: TooLargeForFast,
    ErrorCode.NO_EVICTABLE_SPACE: NoEvictableSpace,
    ErrorCode.NOT_OPEN: NotOpen,
    ErrorCode.CORRUPT: CorruptArtifact,
    ErrorCode.PROTOCOL_ERROR: ProtocolError,
}


def error_from_code(code: ErrorCode, detail: str) -> MRMError:
    """Rebuild a local exception for an error frame received from the daemon."""
    cls = _BY_CODE.get(code)
    if cls is None:
        return RemoteError(code, detail)
    return cls(detail)
