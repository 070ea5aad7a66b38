"""Client-side access to the object store.

The client sends lifecycle requests over the control socket and maps the
returned backing files with ``mmap``, so reads and writes of object
bytes happen directly against shared memory.  The client keeps two
counters, ``write_passes`` and ``bytes_written``, that tally every pass
over payload bytes made through :meth:`WritableObject.write`; the
zero-copy accounting checks in the benchmark suite are built on them.
"""

from __future__ import annotations

import json
import mmap
import os
import socket
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

from hprm.store import wire
from hprm.store.state import Status
from hprm.store.wire import ID_BYTES

DEFAULT_GET_TIMEOUT_NS = 5_000_000_000

_REF_PREFIX = struct.Struct("<20sQQQH")
_REF_SPAN = struct.Struct("<QQ")


def random_object_id() -> bytes:
    return os.urandom(ID_BYTES)


class StoreError(Exception):
    def __init__(self, status: Status, detail: str = ""):
        self.status = status
        super().__init__(f"store error {status.name}" + (f": {detail}" if detail else ""))


class StoreTimeout(StoreError):
    pass


@dataclass(frozen=True)
class ObjectRef:
    """Where to find a payload inside a store object.

    Travels in OBJ_REF frame bodies.  Spans are (offset, length) pairs
    into the object's mapping: one for the in-band stream and one per
    out-of-band segment, in placeholder order.
    """

    oid: bytes
    total_bytes: int
    inband_span: tuple[int, int]
    segment_spans: tuple[tuple[int, int], ...]

    def encode(self) -> bytes:
        head = _REF_PREFIX.pack(
            self.oid,
            self.total_bytes,
            self.inband_span[0],
            self.inband_span[1],
            len(self.segment_spans),
        )
        return head + b"".join(_REF_SPAN.pack(*span) for span in self.segment_spans)

    @classmethod
    def decode(cls, buf: bytes | memoryview) -> "ObjectRef":
        oid, total, ib_off, ib_len, count = _REF_PREFIX.unpack_from(buf)
        spans = []
        offset = _REF_PREFIX.size
        for _ in range(count):
            spans.append(_REF_SPAN.unpack_from(buf, offset))
            offset += _REF_SPAN.size
        if offset != len(buf):
            raise ValueError("trailing bytes after object reference")
        return cls(bytes(oid), total, (ib_off, ib_len), tuple(spans))


class WritableObject:
    """A created-but-not-yet-sealed object mapped for writing."""

    def __init__(self, client: "StoreClient", oid: bytes, size: int, path: str):
        self.client = client
        self.oid = oid
        self.size = size
        self.path = path
        self._file = open(path, "r+b")
        self._mm = mmap.mmap(self._file.fileno(), size)

    def write(self, offset: int, data) -> int:
        """Copy ``data`` into the mapping; the one write pass per byte."""
        view = memoryview(data).cast("B") if not isinstance(data, bytes) else data
        n = len(view)
        self._mm[offset : offset + n] = view
        self.client.write_passes += 1
        self.client.bytes_written += n
        return n

    @property
    def view(self) -> memoryview:
        return memoryview(self._mm)

    def seal(self) -> None:
        self.client.seal(self.oid)

    def close(self) -> None:
        try:
            self._mm.close()
        except BufferError:
            pass  # outstanding views keep the mapping alive; GC reclaims it
        self._file.close()

    def __enter__(self) -> "WritableObject":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class SealedObject:
    """A pinned, immutable object mapped read-only."""

    def __init__(self, client: "StoreClient", oid: bytes, size: int, path: str):
        self.client = client
        self.oid = oid
        self.size = size
        self.path = path
        self._file = open(path, "rb")
        self._mm = mmap.mmap(self._file.fileno(), size, prot=mmap.PROT_READ)
        self._released = False

    @property
    def view(self) -> memoryview:
        return memoryview(self._mm)

    def release(self) -> None:
        """Drop the pin.  The mapping itself survives any live views."""
        if self._released:
            return
        self._released = True
        self.client.release(self.oid)
        try:
            self._mm.close()
        except BufferError:
            pass  # views outlive the pin; memory frees when they drop
        self._file.close()

    def __enter__(self) -> "SealedObject":
        return self

    def __exit__(self, *exc) -> None:
        self.release()


class StoreClient:
    """One control-socket session.

    Requests on a client are serialized; use one client per thread when
    concurrent blocking gets matter.
    """

    def __init__(self, socket_path: str | Path, *, default_get_timeout_ns: int = DEFAULT_GET_TIMEOUT_NS):
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.connect(str(socket_path))
        self._lock = threading.Lock()
        self.default_get_timeout_ns = default_get_timeout_ns
        self.write_passes = 0
        self.bytes_written = 0

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            chunk = self._sock.recv(n - got)
            if not chunk:
                raise ConnectionError("store daemon closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _request(
        self, op: int, oid: bytes, arg: int = 0, *, socket_timeout: float | None = None
    ) -> tuple[Status, int, bytes]:
        with self._lock:
            self._sock.settimeout(socket_timeout)
            self._sock.sendall(wire.encode_request(op, oid, arg))
            prefix = self._recv_exact(wire.RESPONSE_PREFIX_BYTES)
            status, value, blob_len = wire.decode_response_prefix(prefix)
            blob = self._recv_exact(blob_len) if blob_len else b""
            return Status(status), value, blob

    def create(self, size: int, oid: bytes | None = None) -> WritableObject:
        oid = oid if oid is not None else random_object_id()
        status, value, blob = self._request(wire.Op.CREATE, oid, size)
        if status is not Status.OK:
            raise StoreError(status, f"creating {size} bytes")
        return WritableObject(self, oid, value, blob.decode())

    def get(self, oid: bytes, timeout_ns: int | None = None) -> SealedObject:
        timeout_ns = (
            self.default_get_timeout_ns if timeout_ns is None else timeout_ns
        )
        status, value, blob = self._request(
            wire.Op.GET, oid, timeout_ns, socket_timeout=timeout_ns / 1e9 + 5.0
        )
        if status is Status.TIMEOUT:
            raise StoreTimeout(status, f"object {oid.hex()[:12]} not sealed in time")
        if status is not Status.OK:
            raise StoreError(status)
        return SealedObject(self, oid, value, blob.decode())

    def seal(self, oid: bytes) -> None:
        status, _, _ = self._request(wire.Op.SEAL, oid)
        if status is not Status.OK:
            raise StoreError(status)

    def release(self, oid: bytes) -> None:
        status, _, _ = self._request(wire.Op.RELEASE, oid)
        if status is not Status.OK:
            raise StoreError(status)

    def stats(self) -> dict:
        status, _, blob = self._request(wire.Op.STATS, bytes(ID_BYTES))
        if status is not Status.OK:
            raise StoreError(status)
        return json.loads(blob.decode())

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> "StoreClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
