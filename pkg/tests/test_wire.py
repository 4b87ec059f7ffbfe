import random
import socket
import struct

import pytest
from hypothesis import given, settings, strategies as st

from mrm.errors import (
    BadVersion,
    ErrorCode,
    FrameTooLarge,
    MalformedPayload,
    ProtocolError,
    TruncatedFrame,
    UnknownMessageType,
)
from mrm.segment import MODEL, BlockGranularity
from mrm.wire import (
    MAX_FRAME,
    CloseRequest,
    ErrorMsg,
    OpenRequest,
    StatsRequest,
    decode,
    encode,
    read_frame,
    request_reply,
    send,
)
from tests.wire_messages import GENERATORS, fuzz_frame

# Hand-assembled frames; these are the vectors documented in docs/wire.md.
GOLDEN = [
    (CloseRequest(7, 9),
     "12000000" "03" "0100" "0700000000000000" "0900000000000000"),
    (StatsRequest(),
     "02000000" "05" "0100"),
    (OpenRequest("mxnet", "alexnet", "1.0.0", MODEL, 42),
     "22000000" "01" "0100" "0500" + b"mxnet".hex() + "0700" + b"alexnet".hex()
     + "0500" + b"1.0.0".hex() + "00" + "2a00000000000000"),
    (OpenRequest("a", "b", "1", BlockGranularity(2 * 1024 * 1024), 0),
     "1c000000" "01" "0100" "010061" "010062" "010031" "02" "0000200000000000" "0000000000000000"),
    (ErrorMsg(ErrorCode.NOT_FOUND, "nope"),
     "08000000" "7f" "0100" "0400" + b"nope".hex()),
]


@pytest.mark.parametrize("msg,hexframe", GOLDEN)
def test_golden_vectors(msg, hexframe):
    frame = bytes.fromhex(hexframe)
    assert struct.unpack_from("<I", frame)[0] == len(frame) - 5
    assert encode(msg) == frame
    assert decode(frame) == msg


def test_structure_of_close_request():
    frame = encode(CloseRequest(7, 9))
    assert frame[4] == 0x03 and int.from_bytes(frame[:4], "little") == len(frame) - 5


def test_truncated_frame():
    frame = struct.pack("<IB", 20, 0x03) + bytes(10)
    with pytest.raises(TruncatedFrame):
        decode(frame)
    with pytest.raises(TruncatedFrame):
        decode(b"\x01\x00")


def test_frame_limits_and_types():
    with pytest.raises(FrameTooLarge):
        decode(struct.pack("<IB", MAX_FRAME + 1, 0x03))
    with pytest.raises(FrameTooLarge):
        encode(_huge_stats())
    with pytest.raises(UnknownMessageType):
        decode(struct.pack("<IB", 0, 0x42))
    with pytest.raises(MalformedPayload):
        decode(encode(CloseRequest(1, 2)) + b"\x00")


def _huge_stats():
    from mrm.wire import ModelStats, StatsResponse
    m = ModelStats("n" * 60000, "m" * 60000, "1", 0, 0, ())
    return StatsResponse(models=(m,) * 150)


def test_bad_version():
    frame = bytearray(encode(CloseRequest(1, 2)))
    frame[5:7] = (2).to_bytes(2, "little")
    with pytest.raises(BadVersion):
        decode(bytes(frame))
    with pytest.raises(BadVersion):
        decode(encode(OpenRequest("a", "b", "1", protocol_version=0)))


def test_invalid_utf8_rejected():
    frame = bytes.fromhex("0a000000" "01" "0100" "0100ff" "0000" "0000" "00")
    with pytest.raises(ProtocolError):
        decode(frame)


@pytest.mark.parametrize("kind", sorted(GENERATORS))
def test_round_trip_random(kind):
    rng = random.Random(kind)
    for _ in range(300):
        m = GENERATORS[kind](rng)
        assert decode(encode(m)) == m


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_decode_never_crashes(data):
    try:
        decode(data)
    except ProtocolError:
        pass


def test_mutated_frames_fail_structurally():
    rng = random.Random(7)
    corpus = [encode(g(rng)) for g in GENERATORS.values() for _ in range(10)]
    for _ in range(20000):
        try:
            decode(fuzz_frame(rng, corpus))
        except ProtocolError:
            pass


def test_socket_transport():
    a, b = socket.socketpair()
    with a, b:
        send(b, ErrorMsg(ErrorCode.NOT_OPEN, "x"))
        assert read_frame(a) == (0x7F, encode(ErrorMsg(ErrorCode.NOT_OPEN, "x"))[5:])
        b.sendall(encode(StatsRequest()))
        a.sendall(encode(ErrorMsg(ErrorCode.INTERNAL)))
        assert request_reply(b, StatsRequest()) == ErrorMsg(ErrorCode.INTERNAL)
        b.close()
        assert read_frame(a) is not None  # the StatsRequest sent by request_reply
