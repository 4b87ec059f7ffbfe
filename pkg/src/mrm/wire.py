"""Framed binary protocol between clients and the daemon.

Frame: ``u32 payload_length | u8 message_type | payload`` (little-endian).
``payload_length`` counts the payload only, not the type byte. Strings are
``u16 length + UTF-8``; lists are ``u32 count + elements``; a granularity is
``u8 tag`` (0 model, 1 layer, 2 block) followed by ``u64 block_bytes`` for
blocks. Request messages lead with ``u16 protocol_version``.

See ``docs/wire.md`` for the byte-level layout of every message and golden
vectors.
"""

from __future__ import annotations

import functools
import socket
import struct
from dataclasses import dataclass
from typing import Optional, Union

from .errors import (
    BadVersion,
    ConnectionLost,
    ErrorCode,
    FrameTooLarge,
    MalformedPayload,
    TruncatedFrame,
    UnknownMessageType,
)
from .format import DType, FootprintEstimate
from .segment import BlockGranularity, LAYER, MODEL, ShareGranularity

PROTOCOL_VERSION = 1
MAX_FRAME = 16 * 1024 * 1024
HEADER = struct.Struct("<IB")

OPEN_REQ = 0x01
OPEN_RESP = 0x02
CLOSE_REQ = 0x03
CLOSE_RESP = 0x04
STATS_REQ = 0x05
STATS_RESP = 0x06
ERROR = 0x7F

OUTCOMES = ("FastHit", "HostHit", "DiskLoad", "RemoteFetch")
TIERS = ("FAST", "HOST", "LOCAL_DISK", "REMOTE")
_DTYPES = (DType.F64, DType.F32, DType.F16, DType.I8)


@dataclass(frozen=True)
class OpenRequest:
    namespace: str
    name: str
    version: str
    granularity: ShareGranularity = MODEL
    client_id: int = 0
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class HandleObject:
    name: str
    token: str
    generation: int
    offset: int
    length: int


@dataclass(frozen=True)
class TensorInfo:
    name: str
    dims: tuple[int, ...]
    dtype: DType
    offset: int
    nbytes: int


@dataclass(frozen=True)
class OpenResponse:
    """The ModelHandle: where the shared objects live and how to slice them."""

    model_id: int
    handle_id: int
    footprint: FootprintEstimate
    objects: tuple[HandleObject, ...]
    manifest_digest: bytes
    outcome: str = "FastHit"
    tensors: tuple[TensorInfo, ...] = ()
    # fetch, disk_read, host_to_fast_copy, handle_export, daemon total (seconds)
    timings: tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CloseRequest:
    model_id: int
    handle_id: int
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class CloseResponse:
    model_id: int
    handle_id: int
    refcount: int


@dataclass(frozen=True)
class StatsRequest:
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class TierStats:
    tier: str
    hits: int
    misses: int
    evictions: int
    used_bytes: int
    capacity_bytes: int


@dataclass(frozen=True)
class ModelStats:
    namespace: str
    name: str
    version: str
    refcount: int
    use_count: int
    residency: tuple[str, ...]


@dataclass(frozen=True)
class StatsResponse:
    tiers: tuple[TierStats, ...] = ()
    models: tuple[ModelStats, ...] = ()
    # disk_reads, remote_fetches, opens, closes, errors
    counters: tuple[int, int, int, int, int] = (0, 0, 0, 0, 0)
    calibration: Optional[tuple[float, float, float]] = None  # q, o, s

    def tier(self, name: str) -> TierStats:
        for t in self.tiers:
            if t.tier == name:
                return t
        raise KeyError(name)

    @property
    def disk_reads(self) -> int:
        return self.counters[0]


@dataclass(frozen=True)
class ErrorMsg:
    code: ErrorCode
    detail: str = ""


Message = Union[OpenRequest, OpenResponse, CloseRequest, CloseResponse,
                StatsRequest, StatsResponse, ErrorMsg]


# -- encoding -----------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _struct(fmt: str) -> struct.Struct:
    return struct.Struct("<" + fmt)


class _Writer:
    __slots__ = ("parts",)

    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(_struct(fmt).pack(*values))

    def string(self, s: str) -> None:
        data = s.encode("utf-8")
        if len(data) > 0xFFFF:
            raise ValueError("string longer than 65535 bytes")
        self.parts.append(struct.pack("<H", len(data)) + data)

    def count(self, n: int) -> None:
        self.pack("I", n)

    def granularity(self, g: ShareGranularity) -> None:
        if isinstance(g, BlockGranularity):
            self.pack("BQ", 2, g.block_bytes)
        else:
            self.pack("B", g.tag)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


def _encode_payload(msg: Message) -> tuple[int, bytes]:
    w = _Writer()
    if isinstance(msg, OpenRequest):
        w.pack("H", msg.protocol_version)
        w.string(msg.namespace)
        w.string(msg.name)
        w.string(msg.version)
        w.granularity(msg.granularity)
        w.pack("Q", msg.client_id)
        return OPEN_REQ, w.bytes()
    if isinstance(msg, OpenResponse):
        fp = msg.footprint
        w.pack("QQQQQ", msg.model_id, msg.handle_id, fp.weights_bytes, fp.workspace_bytes, fp.total_bytes)
        w.count(len(msg.objects))
        for o in msg.objects:
            w.string(o.name)
            w.string(o.token)
            w.pack("QQQ", o.generation, o.offset, o.length)
        if len(msg.manifest_digest) != 32:
            raise ValueError("manifest_digest must be 32 bytes")
        w.parts.append(bytes(msg.manifest_digest))
        w.pack("B", OUTCOMES.index(msg.outcome))
        w.parts.append(_encode_tensors(msg.tensors))
        w.pack("5d", *msg.timings)
        return OPEN_RESP, w.bytes()
    if isinstance(msg, CloseRequest):
        w.pack("HQQ", msg.protocol_version, msg.model_id, msg.handle_id)
        return CLOSE_REQ, w.bytes()
    if isinstance(msg, CloseResponse):
        w.pack("QQI", msg.model_id, msg.handle_id, msg.refcount)
        return CLOSE_RESP, w.bytes()
    if isinstance(msg, StatsRequest):
        w.pack("H", msg.protocol_version)
        return STATS_REQ, w.bytes()
    if isinstance(msg, StatsResponse):
        w.count(len(msg.tiers))
        for t in msg.tiers:
            w.pack("BQQQQQ", TIERS.index(t.tier), t.hits, t.misses, t.evictions,
                   t.used_bytes, t.capacity_bytes)
        w.count(len(msg.models))
        for m in msg.models:
            w.string(m.namespace)
            w.string(m.name)
            w.string(m.version)
            mask = sum(1 << TIERS.index(r) for r in m.residency)
            w.pack("IQB", m.refcount, m.use_count, mask)
        w.pack("5Q", *msg.counters)
        if msg.calibration is None:
            w.pack("B", 0)
        else:
            w.pack("B3d", 1, *msg.calibration)
        return STATS_RESP, w.bytes()
    if isinstance(msg, ErrorMsg):
        w.pack("H", int(msg.code))
        w.string(msg.detail)
        return ERROR, w.bytes()
    raise TypeError(f"cannot encode {type(msg).__name__}")


# Tensor tables repeat verbatim on every open of a model; both directions memoize them.
_ENCODED: dict[int, tuple] = {}


def _encode_tensors(tensors: tuple) -> bytes:
    hit = _ENCODED.get(id(tensors))
    if hit is not None and hit[0] is tensors:
        return hit[1]
    data = _encode_tensor_table(tensors)
    if len(_ENCODED) > 1024:
        _ENCODED.clear()
    _ENCODED[id(tensors)] = (tensors, data)
    return data


def _encode_tensor_table(tensors) -> bytes:
    w = _Writer()
    w.count(len(tensors))
    for t in tensors:
        w.string(t.name)
        w.count(len(t.dims))
        w.pack(f"{len(t.dims)}Q", *t.dims)
        w.pack("BQQ", _DTYPES.index(t.dtype), t.offset, t.nbytes)
    return w.bytes()


@functools.lru_cache(maxsize=512)
def _decode_tensors(section: bytes) -> tuple:
    r = _Reader(memoryview(section))
    tensors = []
    for _ in range(r.count(2 + 4 + 17)):
        name = r.string()
        ndim = r.count(8)
        dims = r.unpack(f"{ndim}Q")
        dt, offset, nbytes = r.unpack("BQQ")
        tensors.append(TensorInfo(name, tuple(dims), r.enum(_DTYPES, dt, "dtype"), offset, nbytes))
    r.done()
    return tuple(tensors)


def encode(msg: Message) -> bytes:
    mtype, payload = _encode_payload(msg)
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(payload), mtype) + payload


# -- decoding -----------------------------------------------------------------

class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt: str):
        s = _struct(fmt)
        end = self.pos + s.size
        if end > len(self.buf):
            raise MalformedPayload("payload ends inside a field")
        values = s.unpack_from(self.buf, self.pos)
        self.pos = end
        return values

    def one(self, fmt: str):
        return self.unpack(fmt)[0]

    def raw(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise MalformedPayload("payload ends inside a field")
        data = bytes(self.buf[self.pos:end])
        self.pos = end
        return data

    def string(self) -> str:
        n = self.one("H")
        try:
            return self.raw(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload(f"invalid UTF-8: {exc}") from None

    def count(self, min_item: int) -> int:
        n = self.one("I")
        if n * min_item > len(self.buf) - self.pos:
            raise MalformedPayload(f"list of {n} items cannot fit in the payload")
        return n

    def granularity(self) -> ShareGranularity:
        tag = self.one("B")
        if tag == 0:
            return MODEL
        if tag == 1:
            return LAYER
        if tag == 2:
            try:
                return BlockGranularity(self.one("Q"))
            except ValueError as exc:
                raise MalformedPayload(str(exc)) from None
        raise MalformedPayload(f"unknown granularity tag {tag}")

    def version(self) -> int:
        v = self.one("H")
        if v != PROTOCOL_VERSION:
            raise BadVersion(f"protocol version {v}, expected {PROTOCOL_VERSION}")
        return v

    def enum(self, table, index: int, what: str):
        if index >= len(table):
            raise MalformedPayload(f"unknown {what} {index}")
        return table[index]

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedPayload(f"{len(self.buf) - self.pos} trailing bytes")


def decode_payload(mtype: int, payload) -> Message:
    r = _Reader(memoryview(payload))
    if mtype == OPEN_REQ:
        v = r.version()
        msg = OpenRequest(r.string(), r.string(), r.string(), r.granularity(), r.one("Q"), v)
    elif mtype == OPEN_RESP:
        model_id, handle_id, wb, ws, tb = r.unpack("QQQQQ")
        objects = []
        for _ in range(r.count(2 + 2 + 24)):
            name, token = r.string(), r.string()
            objects.append(HandleObject(name, token, *r.unpack("QQQ")))
        digest = r.raw(32)
        outcome = r.enum(OUTCOMES, r.one("B"), "outcome")
        end = len(r.buf) - _struct("5d").size
        if end < r.pos:
            raise MalformedPayload("payload ends inside a field")
        tensors = _decode_tensors(bytes(r.buf[r.pos:end]))
        r.pos = end
        timings = r.unpack("5d")
        msg = OpenResponse(model_id, handle_id, FootprintEstimate(wb, ws, tb), tuple(objects),
                           digest, outcome, tensors, tuple(timings))
    elif mtype == CLOSE_REQ:
        v = r.version()
        model_id, handle_id = r.unpack("QQ")
        msg = CloseRequest(model_id, handle_id, v)
    elif mtype == CLOSE_RESP:
        msg = CloseResponse(*r.unpack("QQI"))
    elif mtype == STATS_REQ:
        msg = StatsRequest(r.version())
    elif mtype == STATS_RESP:
        tiers = []
        for _ in range(r.count(41)):
            idx, *rest = r.unpack("BQQQQQ")
            tiers.append(TierStats(r.enum(TIERS, idx, "tier"), *rest))
        models = []
        for _ in range(r.count(6 + 13)):
            ns, name, version = r.string(), r.string(), r.string()
            rc, uses, mask = r.unpack("IQB")
            if mask >> len(TIERS):
                raise MalformedPayload(f"bad residency mask {mask:#x}")
            residency = tuple(t for i, t in enumerate(TIERS) if mask & (1 << i))
            models.append(ModelStats(ns, name, version, rc, uses, residency))
        counters = r.unpack("5Q")
        present = r.one("B")
        if present > 1:
            raise MalformedPayload("bad calibration flag")
        calibration = r.unpack("3d") if present else None
        msg = StatsResponse(tuple(tiers), tuple(models), tuple(counters),
                            tuple(calibration) if calibration else None)
    elif mtype == ERROR:
        code = r.one("H")
        try:
            code = ErrorCode(code)
        except ValueError:
            raise MalformedPayload(f"unknown error code {code}") from None
        msg = ErrorMsg(code, r.string())
    else:
        raise UnknownMessageType(f"message type {mtype:#04x}")
    r.done()
    return msg


def decode(frame) -> Message:
    """Decode exactly one complete frame."""
    frame = memoryview(frame).cast("B") if not isinstance(frame, memoryview) else frame
    if len(frame) < HEADER.size:
        raise TruncatedFrame(f"{len(frame)} bytes is shorter than a frame header")
    length, mtype = HEADER.unpack_from(frame)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared payload of {length} bytes exceeds {MAX_FRAME}")
    available = len(frame) - HEADER.size
    if available < length:
        raise TruncatedFrame(f"declared {length} payload bytes, got {available}")
    if available > length:
        raise MalformedPayload(f"{available - length} bytes after the frame")
    return decode_payload(mtype, frame[HEADER.size:])


# -- socket transport ---------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:])
        if k == 0:
            raise ConnectionLost(f"peer closed after {got} of {n} bytes")
        got += k
    return bytes(buf)


def read_frame(sock: socket.socket) -> Optional[tuple[int, bytes]]:
    """Return ``(type, payload)`` or None on a clean EOF between frames."""
    try:
        first = sock.recv(HEADER.size)
    except ConnectionResetError:
        return None
    if not first:
        return None
    try:
        head = first + (_recv_exact(sock, HEADER.size - len(first)) if len(first) < HEADER.size else b"")
        length, mtype = HEADER.unpack(head)
        if length > MAX_FRAME:
            raise FrameTooLarge(f"declared payload of {length} bytes exceeds {MAX_FRAME}")
        return mtype, _recv_exact(sock, length)
    except (ConnectionResetError, BrokenPipeError) as exc:
        raise ConnectionLost(str(exc)) from None


def send(sock: socket.socket, msg: Message) -> None:
    try:
        sock.sendall(encode(msg))
    except (BrokenPipeError, ConnectionResetError) as exc:
        raise ConnectionLost(str(exc)) from None


def request_reply(sock: socket.socket, msg: Message) -> Message:
    """Lockstep call: send one request frame, wait for exactly one reply."""
    send(sock, msg)
    frame = read_frame(sock)
    if frame is None:
        raise ConnectionLost("daemon closed the connection")
    return decode_payload(*frame)
