"""Eager framed TCP transport.

Every message is one frame: a fixed 22-byte header followed by an opaque
body.  Header layout, all little-endian:

    offset 0   u8   frame type
    offset 1   u8   flags (reserved, zero)
    offset 2   i64  tag time (nanoseconds)
    offset 10  u32  tag microstep
    offset 14  u32  destination port id (zero for control frames)
    offset 18  u32  body length

The receive path is eager: each connection allocates its receive buffer
once, up front, and every frame is read into it -- no per-message
allocation, no deferred reads.  ``receive_buffer_allocations`` stays at 1
for the life of the connection and tests assert exactly that.  Frames
larger than the buffer are rejected on both send and receive, so peers
must agree on the buffer size (it is federation configuration, not a
per-connection negotiation).

Sends write the header and the body as two separate ``sendall`` calls so
large bodies are never concatenated into a fresh buffer.  With packet
coalescing left on, the kernel may hold the small header write back
waiting for an ACK, which is catastrophic for request/response latency;
``ConnectionOptions.disable_coalescing`` (default on) sets TCP_NODELAY.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum

from hprm.tags import Tag

log = logging.getLogger(__name__)

HEADER = struct.Struct("<BBqIII")
HEADER_BYTES = HEADER.size  # 22
MAX_BODY_BYTES = 2**31


class FrameType(IntEnum):
    JOIN = 1
    START = 2
    NET = 3          # earliest possible future event announcement
    LTC = 4          # tag completion announcement
    TAG_GRANT = 5
    STOP = 6
    RESIGN = 7
    TAGGED_MSG = 8   # inline payload
    OBJ_REF = 9      # payload resident in the object store
    PING = 10


class TransportError(Exception):
    pass


class FrameProtocolError(TransportError):
    """The peer sent bytes that are not a legal frame."""


class OversizeFrameError(TransportError):
    """Frame does not fit the eager receive buffer contract."""


@dataclass(frozen=True, slots=True)
class Frame:
    type: int
    tag: Tag
    port: int = 0
    body: bytes = b""
    flags: int = 0


@dataclass(frozen=True)
class ConnectionOptions:
    eager_buffer_bytes: int = 65536
    disable_coalescing: bool = True
    connect_timeout: float = 5.0

    def __post_init__(self) -> None:
        if self.eager_buffer_bytes < 1024:
            raise ValueError("eager buffer must be at least 1 KiB")


def encode_header(frame: Frame) -> bytes:
    return HEADER.pack(
        frame.type,
        frame.flags,
        frame.tag.time,
        frame.tag.microstep,
        frame.port,
        len(frame.body),
    )


def decode_header(buf) -> tuple[int, int, Tag, int, int]:
    """Parse a header; returns (type, flags, tag, port, body_len)."""
    ftype, flags, tag_time, microstep, port, body_len = HEADER.unpack_from(buf)
    try:
        FrameType(ftype)
    except ValueError:
        raise FrameProtocolError(f"unknown frame type {ftype}") from None
    try:
        tag = Tag(tag_time, microstep)
    except ValueError as exc:
        raise FrameProtocolError(f"illegal tag encoding: {exc}") from None
    if body_len > MAX_BODY_BYTES:
        raise FrameProtocolError(f"declared body length {body_len} is absurd")
    return ftype, flags, tag, port, body_len


class FrameConnection:
    """One framed byte stream over a connected socket.

    Thread safety: ``send_frame`` may be called from any thread (sends are
    serialized internally); ``recv_frame`` must only be called from one
    thread at a time.
    """

    def __init__(self, sock: socket.socket, options: ConnectionOptions | None = None):
        self.options = options or ConnectionOptions()
        self._sock = sock
        if self.options.disable_coalescing and sock.family in (
            socket.AF_INET,
            socket.AF_INET6,
        ):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        self._send_lock = threading.Lock()
        self._buf = bytearray(self.options.eager_buffer_bytes)
        self._view = memoryview(self._buf)
        self.receive_buffer_allocations = 1
        self.frames_sent = 0
        self.frames_received = 0
        self._closed = False

    def fileno(self) -> int:
        return self._sock.fileno()

    @property
    def peer(self):
        try:
            return self._sock.getpeername()
        except OSError:
            return None

    def send_frame(self, frame: Frame) -> None:
        if len(frame.body) + HEADER_BYTES > self.options.eager_buffer_bytes:
            raise OversizeFrameError(
                f"frame of {len(frame.body)} body bytes exceeds the "
                f"{self.options.eager_buffer_bytes}-byte buffer contract"
            )
        header = encode_header(frame)
        with self._send_lock:
            self._sock.sendall(header)
            if frame.body:
                self._sock.sendall(frame.body)
            self.frames_sent += 1

    def _recv_exact(self, offset: int, count: int) -> bool:
        """Fill buf[offset:offset+count]; False on clean EOF at a boundary."""
        got = 0
        while got < count:
            n = self._sock.recv_into(self._view[offset + got : offset + count])
            if n == 0:
                if got == 0 and offset == 0:
                    return False
                raise FrameProtocolError("connection closed mid-frame")
            got += n
        return True

    def recv_frame(self) -> Frame | None:
        """Next frame, or None when the peer closed cleanly between frames."""
        if not self._recv_exact(0, HEADER_BYTES):
            return None
        ftype, flags, tag, port, body_len = decode_header(self._view)
        if HEADER_BYTES + body_len > self.options.eager_buffer_bytes:
            raise OversizeFrameError(
                f"peer declared a {body_len}-byte body; buffer contract is "
                f"{self.options.eager_buffer_bytes} bytes"
            )
        body = b""
        if body_len:
            self._recv_exact(HEADER_BYTES, body_len)
            body = bytes(self._view[HEADER_BYTES : HEADER_BYTES + body_len])
        self.frames_received += 1
        return Frame(ftype, tag, port, body, flags)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()

    def __enter__(self) -> "FrameConnection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class FrameListener:
    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        options: ConnectionOptions | None = None,
    ):
        self.options = options or ConnectionOptions()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(64)

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def accept(self) -> FrameConnection:
        sock, peer = self._sock.accept()
        log.debug("accepted connection from %s", peer)
        return FrameConnection(sock, self.options)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> "FrameListener":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def connect(
    address: tuple[str, int],
    options: ConnectionOptions | None = None,
    *,
    retry_for: float = 0.0,
) -> FrameConnection:
    """Open a framed connection, optionally retrying refused connects.

    ``retry_for`` covers the rendezvous window where a peer's listener is
    known to be coming up but may not be bound yet.
    """
    options = options or ConnectionOptions()
    deadline = time.monotonic() + retry_for
    while True:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.settimeout(options.connect_timeout)
        try:
            sock.connect(tuple(address))
            return FrameConnection(sock, options)
        except (ConnectionRefusedError, ConnectionAbortedError, socket.timeout):
            sock.close()
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.02)


def serve_echo(conn: FrameConnection) -> int:
    """Echo frames back until EOF; returns the echo count."""
    echoed = 0
    while True:
        try:
            frame = conn.recv_frame()
        except TransportError:
            break
        if frame is None:
            break
        conn.send_frame(frame)
        echoed += 1
    return echoed


def ping_rtt(
    conn: FrameConnection,
    count: int,
    *,
    payload_bytes: int = 64,
    warmup: int = 0,
) -> list[int]:
    """Round-trip times, in nanoseconds, of echo pings over ``conn``.

    The peer must be echoing (see :func:`serve_echo`).  Each ping carries
    a sequence number so a mismatched echo fails loudly instead of
    silently skewing the numbers.
    """
    if payload_bytes < 8:
        raise ValueError("payload must hold an 8-byte sequence number")
    samples: list[int] = []
    pad = b"\x00" * (payload_bytes - 8)
    for seq in range(warmup + count):
        body = seq.to_bytes(8, "little") + pad
        start = time.perf_counter_ns()
        conn.send_frame(Frame(FrameType.PING, Tag(0, 0), body=body))
        reply = conn.recv_frame()
        elapsed = time.perf_counter_ns() - start
        if reply is None or reply.type != FrameType.PING:
            raise FrameProtocolError("echo peer vanished mid-ping")
        if reply.body[:8] != body[:8]:
            raise FrameProtocolError("echo reply out of sequence")
        if seq >= warmup:
            samples.append(elapsed)
    return samples
