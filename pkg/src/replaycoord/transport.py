"""Message layer for coordination rounds.

A single frame format carries every message: u32 little-endian length prefix,
magic "CRSX", a one-byte kind tag, the round number, a length-prefixed client
id, an f64 payload vector, and an optional error string.  The same frames run
over an in-memory queue pair (tests, simulation) and over TCP, so both
transports are bit-identical in behavior.
"""
from __future__ import annotations

import queue
import socket
import struct
import time
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

MAGIC = b"CRSX"
DEFAULT_TIMEOUT = 30.0


class MsgKind(IntEnum):
    HELLO = 0
    REPORT = 1
    TARGET = 2
    DONE = 3
    ERROR = 4


class TransportError(RuntimeError):
    """Framing violation, timeout, or peer-reported failure."""


@dataclass(frozen=True)
class CoordMessage:
    kind: MsgKind
    round: int
    client_id: str
    payload: np.ndarray = field(default_factory=lambda: np.empty(0))
    error_text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "payload", np.asarray(self.payload, dtype=np.float64))


def encode(msg: CoordMessage) -> bytes:
    """Serialize a message into one length-prefixed frame."""
    cid = msg.client_id.encode("utf-8")
    err = msg.error_text.encode("utf-8")
    body = b"".join([
        MAGIC,
        struct.pack("<BI", int(msg.kind), msg.round),
        struct.pack("<H", len(cid)), cid,
        struct.pack("<I", msg.payload.size), msg.payload.astype("<f8").tobytes(),
        struct.pack("<H", len(err)), err,
    ])
    if len(body) > 0xFFFFFFFF:
        raise TransportError("payload too large for u32 framing")
    return struct.pack("<I", len(body)) + body


def decode(frame: bytes) -> CoordMessage:
    """Inverse of :func:`encode`; the length prefix must already be stripped
    or included as the first four bytes of a complete frame."""
    if len(frame) >= 4 and frame[4:8] == MAGIC:
        (declared,) = struct.unpack_from("<I", frame, 0)
        if declared != len(frame) - 4:
            raise TransportError("frame length prefix mismatch")
        frame = frame[4:]
    if frame[:4] != MAGIC:
        raise TransportError("bad magic")
    try:
        kind_raw, rnd = struct.unpack_from("<BI", frame, 4)
        kind = MsgKind(kind_raw)
        off = 9
        (id_len,) = struct.unpack_from("<H", frame, off)
        off += 2
        cid = frame[off:off + id_len].decode("utf-8")
        off += id_len
        (count,) = struct.unpack_from("<I", frame, off)
        off += 4
        end = off + 8 * count
        if end > len(frame):
            raise TransportError("truncated payload")
        payload = np.frombuffer(frame[off:end], dtype="<f8").copy()
        off = end
        (err_len,) = struct.unpack_from("<H", frame, off)
        off += 2
        err = frame[off:off + err_len].decode("utf-8")
    except (struct.error, ValueError) as exc:
        raise TransportError(f"malformed frame: {exc}") from None
    return CoordMessage(kind, rnd, cid, payload, err)


class MemoryChannel:
    """One endpoint of an in-process duplex channel.

    Frames still pass through encode/decode so behavior matches TCP exactly.
    """

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox

    def send(self, msg: CoordMessage) -> None:
        self._outbox.put(encode(msg))

    def recv(self, timeout: float = DEFAULT_TIMEOUT) -> CoordMessage:
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError("receive timeout") from None
        return decode(frame)

    def close(self) -> None:
        pass


def memory_channel_pair() -> tuple[MemoryChannel, MemoryChannel]:
    a, b = queue.Queue(), queue.Queue()
    return MemoryChannel(a, b), MemoryChannel(b, a)


class TcpChannel:
    """Length-prefixed framing over a connected socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                raise TransportError("connection closed mid-frame")
            buf += chunk
        return buf

    def send(self, msg: CoordMessage) -> None:
        try:
            self._sock.sendall(encode(msg))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from None

    def recv(self, timeout: float = DEFAULT_TIMEOUT) -> CoordMessage:
        self._sock.settimeout(timeout)
        try:
            (length,) = struct.unpack("<I", self._read_exact(4))
            return decode(self._read_exact(length))
        except socket.timeout:
            raise TransportError("receive timeout") from None
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from None

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def serve_coordination(bind_address: tuple[str, int], expected_clients: int,
                       max_rounds: int = 4, tol: float = 1e-6,
                       timeout: float = DEFAULT_TIMEOUT):
    """Accept exactly ``expected_clients`` connections and drive a session.

    Each client opens with HELLO declaring its id and gradient dimension;
    duplicate ids are rejected with an ERROR frame.  Returns the server-side
    coordination report (selections stay at the clients).
    """
    from .coordination import collect_hellos, drive_server

    server = socket.create_server(bind_address)
    server.settimeout(timeout)
    channels = []
    try:
        while len(channels) < expected_clients:
            try:
                sock, _ = server.accept()
            except socket.timeout:
                raise TransportError("timed out waiting for clients") from None
            channels.append(TcpChannel(sock))
        by_id, dim = collect_hellos(channels, timeout)
        return drive_server(by_id, dim, max_rounds, tol, timeout)
    finally:
        for ch in channels:
            ch.close()
        server.close()


def connect_with_retry(address: tuple[str, int],
                       timeout: float = DEFAULT_TIMEOUT) -> socket.socket:
    """Connect to ``address``, retrying refused connections until ``timeout``.

    Clients are commonly launched alongside the server; retrying bridges the
    window before the listening socket is bound.
    """
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection(address, timeout=timeout)
        except ConnectionRefusedError:
            if time.monotonic() >= deadline:
                raise TransportError("connection refused") from None
            time.sleep(0.05)


def run_tcp_client(address: tuple[str, int], state, timeout: float = DEFAULT_TIMEOUT):
    """Connect to a coordination server and participate until DONE.

    Returns the locally rounded replay selection and the final fractional
    weights; gradient data never leaves the client.
    """
    from .coordination import client_session

    channel = TcpChannel(connect_with_retry(address, timeout))
    try:
        return client_session(channel, state, timeout)
    finally:
        channel.close()
