"""Length-prefixed binary framing between server and clients.

Every frame is a 10-byte header followed by the payload; all integers and
floats are little-endian.

    header   magic "FRLH" | version u8 (=1) | msg_type u8 | payload_len u32

    0x01 RoundBroadcast  round u32 | dim u32 | params dim x f64
    0x02 ClientUpdate    client_id u32 | round u32 | n_samples u64 | dim u32 | delta dim x f64
    0x03 Hello           client_id u32
    0x04 Shutdown        (empty)
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

from frlhf.local import ClientUpdate

MAGIC = b"FRLH"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size  # 10
MAX_PAYLOAD = 1 << 31

MSG_ROUND_BROADCAST = 0x01
MSG_CLIENT_UPDATE = 0x02
MSG_HELLO = 0x03
MSG_SHUTDOWN = 0x04

_F64 = np.dtype("<f8")
_BROADCAST_HEAD = struct.Struct("<II")
_UPDATE_HEAD = struct.Struct("<IIQI")
_HELLO = struct.Struct("<I")


class ProtocolError(Exception):
    """Base class for malformed or unexpected frames."""


class BadMagicError(ProtocolError):
    pass


class VersionMismatchError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class PayloadLengthError(ProtocolError):
    """Declared payload length disagrees with the bytes present or the layout."""


class UnknownMessageTypeError(ProtocolError):
    pass


class ConnectionClosedError(ProtocolError):
    """Peer closed the stream (cleanly or not) before a full frame arrived."""


@dataclass(frozen=True, eq=False)
class RoundBroadcast:
    round: int
    params: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "params", np.asarray(self.params, dtype=np.float64).reshape(-1))

    def __eq__(self, other):
        return (
            isinstance(other, RoundBroadcast)
            and self.round == other.round
            and self.params.shape == other.params.shape
            and self.params.tobytes() == other.params.tobytes()
        )


@dataclass(frozen=True)
class Hello:
    client_id: int


@dataclass(frozen=True)
class Shutdown:
    pass


def _check_u(value: int, bits: int, name: str) -> None:
    if not 0 <= value < (1 << bits):
        raise ValueError(f"{name}={value} does not fit in u{bits}")


def _payload(msg) -> tuple[int, bytes]:
    if isinstance(msg, RoundBroadcast):
        _check_u(msg.round, 32, "round")
        _check_u(msg.params.size, 32, "dim")
        return MSG_ROUND_BROADCAST, _BROADCAST_HEAD.pack(msg.round, msg.params.size) + msg.params.astype(_F64).tobytes()
    if isinstance(msg, ClientUpdate):
        _check_u(msg.client_id, 32, "client_id")
        _check_u(msg.round, 32, "round")
        _check_u(msg.n_samples, 64, "n_samples")
        _check_u(msg.delta.size, 32, "dim")
        head = _UPDATE_HEAD.pack(msg.client_id, msg.round, msg.n_samples, msg.delta.size)
        return MSG_CLIENT_UPDATE, head + msg.delta.astype(_F64).tobytes()
    if isinstance(msg, Hello):
        _check_u(msg.client_id, 32, "client_id")
        return MSG_HELLO, _HELLO.pack(msg.client_id)
    if isinstance(msg, Shutdown):
        return MSG_SHUTDOWN, b""
    raise TypeError(f"cannot encode {type(msg).__name__}")


def encode_frame(msg) -> bytes:
    msg_type, payload = _payload(msg)
    if len(payload) >= MAX_PAYLOAD:
        raise PayloadLengthError(f"payload of {len(payload)} bytes exceeds limit")
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def decode_header(data: bytes) -> tuple[int, int]:
    """Validate a header; returns ``(msg_type, payload_len)``."""
    if len(data) < HEADER_SIZE:
        raise TruncatedFrameError(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, msg_type, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"protocol version {version}, expected {VERSION}")
    if msg_type not in (MSG_ROUND_BROADCAST, MSG_CLIENT_UPDATE, MSG_HELLO, MSG_SHUTDOWN):
        raise UnknownMessageTypeError(f"unknown message type 0x{msg_type:02x}")
    if length >= MAX_PAYLOAD:
        raise PayloadLengthError(f"declared payload length {length} exceeds limit")
    return msg_type, length


def _vector(payload: bytes, offset: int, dim: int, what: str) -> np.ndarray:
    expected = offset + 8 * dim
    if len(payload) != expected:
        raise PayloadLengthError(f"{what}: dim {dim} implies {expected} payload bytes, frame has {len(payload)}")
    return np.frombuffer(payload, dtype=_F64, count=dim, offset=offset).astype(np.float64)


def decode_payload(msg_type: int, payload: bytes):
    if msg_type == MSG_ROUND_BROADCAST:
        if len(payload) < _BROADCAST_HEAD.size:
            raise PayloadLengthError("RoundBroadcast payload too short")
        rnd, dim = _BROADCAST_HEAD.unpack_from(payload)
        return RoundBroadcast(rnd, _vector(payload, _BROADCAST_HEAD.size, dim, "RoundBroadcast"))
    if msg_type == MSG_CLIENT_UPDATE:
        if len(payload) < _UPDATE_HEAD.size:
            raise PayloadLengthError("ClientUpdate payload too short")
        cid, rnd, n, dim = _UPDATE_HEAD.unpack_from(payload)
        return ClientUpdate(cid, rnd, _vector(payload, _UPDATE_HEAD.size, dim, "ClientUpdate"), n)
    if msg_type == MSG_HELLO:
        if len(payload) != _HELLO.size:
            raise PayloadLengthError("Hello payload must be 4 bytes")
        return Hello(_HELLO.unpack(payload)[0])
    if msg_type == MSG_SHUTDOWN:
        if payload:
            raise PayloadLengthError("Shutdown payload must be empty")
        return Shutdown()
    raise UnknownMessageTypeError(f"unknown message type 0x{msg_type:02x}")


def decode_frame(data: bytes):
    """Decode exactly one frame; trailing or missing bytes are errors."""
    msg_type, length = decode_header(data)
    actual = len(data) - HEADER_SIZE
    if actual < length:
        raise TruncatedFrameError(f"payload declares {length} bytes, only {actual} present")
    if actual > length:
        raise PayloadLengthError(f"{actual - length} trailing bytes after payload")
    return decode_payload(msg_type, bytes(data[HEADER_SIZE:]))


# ---------------------------------------------------------------------------
# stream helpers


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionClosedError(f"connection closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def send_message(sock: socket.socket, msg) -> None:
    sock.sendall(encode_frame(msg))


def recv_message(sock: socket.socket):
    header = _recv_exact(sock, HEADER_SIZE)
    msg_type, length = decode_header(header)
    return decode_payload(msg_type, _recv_exact(sock, length))
