"""Local TCP backend: one process per rank.

Wire framing, all integers little-endian::

    [payload length: u64][tag: u64][payload]

Tags with bit 63 set are transport control frames:

    HELLO  payload = sender rank (u64), first frame on every connection
    SYNC   payload = sequence (u64) + user tag (u64) + data; receiver ACKs on match
    ACK    payload = sequence (u64)

Each rank listens on the port given for it in a JSON manifest
(``{"ranks": [{"host": ..., "port": ...}, ...]}``) and opens one outgoing
connection per peer on first send. A single stream per ordered pair keeps
messages between that pair non-overtaking.
"""

from __future__ import annotations

import itertools
import json
import logging
import socket
import struct
import threading
import time
from pathlib import Path
from typing import Sequence

from .base import Communicator, TransportError, TransportTimeout
from .tags import CONTROL_BIT

log = logging.getLogger(__name__)

HELLO = CONTROL_BIT | 1
SYNC = CONTROL_BIT | 2
ACK = CONTROL_BIT | 3

_HEADER = struct.Struct("<QQ")
_U64 = struct.Struct("<Q")


def write_manifest(path, addresses: Sequence[tuple[str, int]]) -> None:
    doc = {"ranks": [{"host": h, "port": int(p)} for h, p in addresses]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_manifest(path) -> list[tuple[str, int]]:
    doc = json.loads(Path(path).read_text())
    return [(r["host"], int(r["port"])) for r in doc["ranks"]]


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        part = sock.recv(min(n - len(chunks), 1 << 20))
        if not part:
            raise ConnectionError("peer closed connection")
        chunks += part
    return bytes(chunks)


class SocketComm(Communicator):
    backend = "sockets"

    def __init__(self, rank: int, addresses: Sequence[tuple[str, int]], *, timeout: float = 30.0):
        super().__init__(rank, len(addresses), timeout=timeout)
        self.addresses = list(addresses)
        self._out: dict[int, socket.socket] = {}
        self._out_locks = {r: threading.Lock() for r in range(self.size)}
        self._sync_seq = itertools.count()
        self._sync_pending: dict[int, object] = {}
        self._sync_lock = threading.Lock()
        self._closed = False
        self._inbound: list[socket.socket] = []

        host, port = self.addresses[rank]
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(max(self.size, 8))
        threading.Thread(target=self._accept_loop, name=f"sf-accept-{rank}", daemon=True).start()

    # -- inbound ---------------------------------------------------------

    def _accept_loop(self):
        while not self._closed:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._inbound.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: socket.socket):
        try:
            length, tag = _HEADER.unpack(_recv_exact(conn, _HEADER.size))
            if tag != HELLO:
                raise TransportError(f"expected HELLO frame, got tag {tag:#x}")
            (src,) = _U64.unpack(_recv_exact(conn, length))
            while True:
                length, tag = _HEADER.unpack(_recv_exact(conn, _HEADER.size))
                payload = _recv_exact(conn, length) if length else b""
                self._dispatch(src, tag, payload)
        except (ConnectionError, OSError):
            if not self._closed:
                log.debug("rank %d: inbound connection closed", self.rank)

    def _dispatch(self, src: int, tag: int, payload: bytes):
        if not tag & CONTROL_BIT:
            self.mailbox.deliver(src, tag, payload)
        elif tag == SYNC:
            seq, user_tag = _HEADER.unpack_from(payload)
            ack = lambda: self._send_frame(src, ACK, _U64.pack(seq))  # noqa: E731
            self.mailbox.deliver(src, user_tag, payload[_HEADER.size:], ack)
        elif tag == ACK:
            (seq,) = _U64.unpack(payload)
            with self._sync_lock:
                callback = self._sync_pending.pop(seq)
            callback()
        else:
            raise TransportError(f"unknown control frame {tag:#x}")

    # -- outbound --------------------------------------------------------

    def _connection(self, dest: int) -> socket.socket:
        sock = self._out.get(dest)
        if sock is not None:
            return sock
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                sock = socket.create_connection(self.addresses[dest], timeout=self.timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportTimeout(f"rank {self.rank} could not connect to rank {dest}")
                time.sleep(0.02)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(_HEADER.pack(_U64.size, HELLO) + _U64.pack(self.rank))
        self._out[dest] = sock
        return sock

    def _send_frame(self, dest: int, tag: int, payload: bytes) -> None:
        with self._out_locks[dest]:
            sock = self._connection(dest)
            sock.sendall(_HEADER.pack(len(payload), tag))
            if payload:
                sock.sendall(payload)

    def _transmit(self, dest, tag, payload, on_match):
        if dest == self.rank:
            self.mailbox.deliver(self.rank, tag, payload, on_match)
        elif on_match is None:
            self._send_frame(dest, tag, payload)
        else:
            seq = next(self._sync_seq)
            with self._sync_lock:
                self._sync_pending[seq] = on_match
            self._send_frame(dest, SYNC, _HEADER.pack(seq, tag) + payload)

    def close(self) -> None:
        self._closed = True
        for sock in [self._listener, *self._out.values(), *self._inbound]:
            try:
                sock.close()
            except OSError:
                pass
