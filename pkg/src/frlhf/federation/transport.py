"""Client handles used by the server loop.

A handle exposes a two-phase round: ``begin_round`` hands the global
parameters to the client and ``finish_round`` blocks until its update is
available.  The server begins every client before finishing any of them, so
socket clients train concurrently while in-process clients run in order.
"""

from __future__ import annotations

import logging
import socket
from typing import Protocol

import numpy as np

from frlhf.federation.wire import (
    ConnectionClosedError,
    Hello,
    ProtocolError,
    RoundBroadcast,
    Shutdown,
    recv_message,
    send_message,
)
from frlhf.local import ClientUpdate

log = logging.getLogger(__name__)


class RoundAbortedError(RuntimeError):
    """A client failed mid-round; the round was not aggregated."""


class Trainer(Protocol):
    client_id: int

    def train(self, round: int, theta: np.ndarray) -> ClientUpdate:
        ...


class InProcessClient:
    def __init__(self, trainer: Trainer):
        self.trainer = trainer
        self.client_id = trainer.client_id
        self._pending = None

    def begin_round(self, round: int, theta: np.ndarray) -> None:
        self._pending = (round, np.array(theta, dtype=np.float64))

    def finish_round(self) -> ClientUpdate:
        if self._pending is None:
            raise RuntimeError("finish_round called without begin_round")
        round, theta = self._pending
        self._pending = None
        try:
            return self.trainer.train(round, theta)
        except Exception as exc:
            raise RoundAbortedError(f"client {self.client_id} failed in round {round}: {exc}") from exc

    def close(self) -> None:
        pass


class RemoteClient:
    """Server-side handle for one connected socket client."""

    def __init__(self, sock: socket.socket, client_id: int, peer=None):
        self.sock = sock
        self.client_id = client_id
        self.peer = peer
        self._round = None

    def begin_round(self, round: int, theta: np.ndarray) -> None:
        try:
            send_message(self.sock, RoundBroadcast(round, theta))
        except OSError as exc:
            raise RoundAbortedError(f"client {self.client_id} unreachable at round {round}: {exc}") from exc
        self._round = round

    def finish_round(self) -> ClientUpdate:
        round = self._round
        try:
            msg = recv_message(self.sock)
        except (OSError, ProtocolError) as exc:
            raise RoundAbortedError(f"client {self.client_id} disconnected during round {round}: {exc}") from exc
        if not isinstance(msg, ClientUpdate):
            raise RoundAbortedError(f"client {self.client_id} sent {type(msg).__name__} instead of an update")
        if msg.client_id != self.client_id or msg.round != round:
            raise RoundAbortedError(
                f"client {self.client_id} sent update for client {msg.client_id} round {msg.round}, expected round {round}"
            )
        return msg

    def close(self) -> None:
        try:
            send_message(self.sock, Shutdown())
        except OSError:
            pass
        self.sock.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ValueError(f"address must be HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


class FederationServer:
    """Listening socket that admits exactly ``n_clients`` clients."""

    def __init__(self, address: str | tuple[str, int], n_clients: int, timeout: float | None = 60.0):
        if n_clients < 1:
            raise ValueError("need at least one client")
        host, port = parse_address(address) if isinstance(address, str) else address
        self.n_clients = n_clients
        self.timeout = timeout
        self.sock = socket.create_server((host, port))
        self.sock.settimeout(timeout)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept_clients(self) -> list[RemoteClient]:
        clients: dict[int, RemoteClient] = {}
        try:
            while len(clients) < self.n_clients:
                conn, peer = self.sock.accept()
                conn.settimeout(self.timeout)
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                msg = recv_message(conn)
                if not isinstance(msg, Hello):
                    conn.close()
                    raise ProtocolError(f"expected Hello from {peer}, got {type(msg).__name__}")
                if msg.client_id in clients:
                    conn.close()
                    raise ProtocolError(f"duplicate client id {msg.client_id}")
                log.info("client %d connected from %s", msg.client_id, peer)
                clients[msg.client_id] = RemoteClient(conn, msg.client_id, peer)
        except BaseException:
            for c in clients.values():
                c.sock.close()
            raise
        return [clients[k] for k in sorted(clients)]

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect(address: str | tuple[str, int], timeout: float | None = 60.0, retries: int = 50, delay: float = 0.1) -> socket.socket:
    import time

    host, port = parse_address(address) if isinstance(address, str) else address
    for attempt in range(retries):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except ConnectionRefusedError:
            if attempt == retries - 1:
                raise
            time.sleep(delay)
    raise AssertionError("unreachable")


def run_client_loop(address, trainer: Trainer, timeout: float | None = 60.0) -> int:
    """Serve rounds for ``trainer`` until the server sends Shutdown.

    Returns the number of rounds completed.
    """
    sock = connect(address, timeout)
    rounds = 0
    try:
        send_message(sock, Hello(trainer.client_id))
        while True:
            try:
                msg = recv_message(sock)
            except ConnectionClosedError:
                log.warning("client %d: server closed the connection", trainer.client_id)
                return rounds
            if isinstance(msg, Shutdown):
                return rounds
            if not isinstance(msg, RoundBroadcast):
                raise ProtocolError(f"client {trainer.client_id}: unexpected {type(msg).__name__}")
            send_message(sock, trainer.train(msg.round, msg.params))
            rounds += 1
    finally:
        sock.close()
