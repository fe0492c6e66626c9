import socket
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from frlhf.federation.wire import (
    HEADER_SIZE,
    BadMagicError,
    ConnectionClosedError,
    Hello,
    PayloadLengthError,
    RoundBroadcast,
    Shutdown,
    TruncatedFrameError,
    UnknownMessageTypeError,
    VersionMismatchError,
    decode_frame,
    encode_frame,
    recv_message,
    send_message,
)
from frlhf.local import ClientUpdate

u32 = st.integers(0, 2**32 - 1)
vectors = arrays(np.float64, st.integers(0, 16), elements=st.floats(allow_nan=False, width=64))

messages = st.one_of(
    st.builds(RoundBroadcast, u32, vectors),
    st.builds(ClientUpdate, u32, u32, vectors, st.integers(0, 2**64 - 1)),
    st.builds(Hello, u32),
    st.just(Shutdown()),
)


@given(messages)
def test_round_trip(msg):
    assert decode_frame(encode_frame(msg)) == msg


def test_hello_layout():
    assert encode_frame(Hello(7)) == b"FRLH\x01\x03\x04\x00\x00\x00" + bytes([7, 0, 0, 0])
    assert encode_frame(Shutdown()) == b"FRLH\x01\x04\x00\x00\x00\x00"
    assert HEADER_SIZE == 10


def test_broadcast_layout_is_little_endian():
    frame = encode_frame(RoundBroadcast(3, [1.5, -2.0]))
    assert frame[:10] == b"FRLH\x01\x01" + struct.pack("<I", 8 + 16)
    assert frame[10:18] == struct.pack("<II", 3, 2)
    assert frame[18:] == struct.pack("<2d", 1.5, -2.0)


def test_update_layout():
    frame = encode_frame(ClientUpdate(2, 5, [0.25], 9))
    assert frame[10:30] == struct.pack("<IIQI", 2, 5, 9, 1)
    assert frame[30:] == struct.pack("<d", 0.25)


def test_signed_zero_and_infinity_preserved():
    msg = RoundBroadcast(0, np.array([-0.0, np.inf]))
    back = decode_frame(encode_frame(msg))
    assert np.signbit(back.params[0]) and back.params[1] == np.inf


@pytest.mark.parametrize(
    "frame,error",
    [
        (b"XRLH\x01\x04\x00\x00\x00\x00", BadMagicError),
        (b"FRLH\x02\x04\x00\x00\x00\x00", VersionMismatchError),
        (b"FRLH\x01\x09\x00\x00\x00\x00", UnknownMessageTypeError),
        (b"FRLH\x01\x04\x00\x00", TruncatedFrameError),
        (b"FRLH\x01\x03\x04\x00\x00\x00\x07\x00", TruncatedFrameError),
        (b"FRLH\x01\x04\x00\x00\x00\x00\x00", PayloadLengthError),
        (b"FRLH\x01\x03\x02\x00\x00\x00\x07\x00", PayloadLengthError),
        (b"FRLH\x01\x04\x01\x00\x00\x00\x00", PayloadLengthError),
    ],
)
def test_malformed_frames(frame, error):
    with pytest.raises(error):
        decode_frame(frame)


def test_dimension_disagreeing_with_length():
    frame = bytearray(encode_frame(RoundBroadcast(0, [1.0, 2.0])))
    frame[14:18] = struct.pack("<I", 3)  # dim field claims 3 values
    with pytest.raises(PayloadLengthError):
        decode_frame(bytes(frame))


def test_out_of_range_fields_rejected():
    with pytest.raises(ValueError):
        encode_frame(Hello(2**32))
    with pytest.raises(ValueError):
        encode_frame(ClientUpdate(0, 0, [1.0], -1))
    with pytest.raises(TypeError):
        encode_frame("hello")


def test_stream_helpers_over_socketpair():
    a, b = socket.socketpair()
    try:
        msgs = [Hello(1), RoundBroadcast(0, np.arange(1000.0)), ClientUpdate(1, 0, [0.5], 3), Shutdown()]
        for m in msgs:
            send_message(a, m)
        assert [recv_message(b) for _ in msgs] == msgs
        a.sendall(encode_frame(Hello(2))[:7])
        a.close()
        with pytest.raises(ConnectionClosedError):
            recv_message(b)
    finally:
        b.close()
