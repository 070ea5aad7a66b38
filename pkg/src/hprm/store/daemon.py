"""The object-store daemon.

One single-threaded event loop owns everything: the lifecycle state, the
backing files, and the control socket.  Clients talk over a unix stream
socket with the :mod:`hprm.store.wire` codec and map the backing files
themselves; the daemon never touches object bytes.

Backing files live in a memory-backed directory (``/dev/shm`` by
default).  Eviction renames the file into a small reuse pool (or unlinks
it once the pool is full), which frees the name immediately but leaves
existing mappings valid until they are unmapped.  Pins are what protect
readers: only sealed objects with zero references are ever evicted, and
a mapping kept past its release may observe recycled contents but never
fault.  The pool exists because recycled files have warm pages -- a
create that reuses one skips the kernel zero-fill of fresh shm pages,
which at tens of megabytes is most of the write cost.

GET requests for objects that are unknown or not yet sealed are parked
until the object is sealed or the request's deadline passes, so a reader
may ask for an object slightly before its writer finishes.

A connection that drops is cleaned up: pins it still held are released
and unsealed objects it created are deleted, so a crashed client cannot
leak references or half-written objects.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import selectors
import signal
import socket
import threading
import time
from pathlib import Path

from hprm.store import wire
from hprm.store.state import Status, StoreState

log = logging.getLogger(__name__)

DEFAULT_CAPACITY = 1 << 30
DEFAULT_GET_TIMEOUT_NS = 5_000_000_000
_POOL_MAX_FILES = 4


class _Conn:
    __slots__ = ("sock", "inbuf", "refs", "creating")

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.inbuf = bytearray()
        self.refs: dict[bytes, int] = {}
        self.creating: set[bytes] = set()


class _Parked:
    __slots__ = ("oid", "conn", "deadline_ns")

    def __init__(self, oid: bytes, conn: _Conn, deadline_ns: int):
        self.oid = oid
        self.conn = conn
        self.deadline_ns = deadline_ns


class StoreDaemon:
    def __init__(
        self,
        socket_path: str | Path,
        capacity_bytes: int = DEFAULT_CAPACITY,
        *,
        directory: str | Path | None = None,
        eviction_fraction: float = 0.2,
    ):
        self.socket_path = Path(socket_path)
        self.state = StoreState(capacity_bytes, eviction_fraction=eviction_fraction)
        self.directory = Path(
            directory if directory is not None else f"/dev/shm/hprm-store-{os.getpid()}"
        )
        self.directory.mkdir(parents=True, exist_ok=True)
        self.socket_path.unlink(missing_ok=True)
        self._listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._listener.bind(str(self.socket_path))
        self._listener.listen(64)
        self._wake_r, self._wake_w = socket.socketpair()
        self._selector = selectors.DefaultSelector()
        self._selector.register(self._listener, selectors.EVENT_READ, "listener")
        self._selector.register(self._wake_r, selectors.EVENT_READ, "wake")
        self._conns: dict[socket.socket, _Conn] = {}
        self._parked: list[_Parked] = []
        self._pool: list[tuple[int, Path]] = []
        self._pool_seq = 0
        self._stopping = False
        self._thread: threading.Thread | None = None

    # -- file handling ---------------------------------------------------

    def object_path(self, oid: bytes) -> Path:
        return self.directory / (oid.hex() + ".obj")

    def _make_file(self, oid: bytes, size: int) -> Path:
        path = self.object_path(oid)
        # Best-fit reuse of a retired backing file: its pages are already
        # faulted in, so a sustained same-sized workload skips the
        # kernel's zero-fill of fresh shm pages on every write.
        best = None
        for i, (pool_size, _) in enumerate(self._pool):
            if pool_size >= size and (best is None or pool_size < self._pool[best][0]):
                best = i
        if best is not None:
            pool_size, pooled = self._pool.pop(best)
            pooled.rename(path)
            if pool_size != size:
                with open(path, "r+b") as f:
                    f.truncate(size)
            return path
        with open(path, "wb") as f:
            f.truncate(size)
        return path

    def _retire_objects(self, oids) -> None:
        """Move dead objects' backing files into the reuse pool.

        Contents are not scrubbed; a recycled file may hand back stale
        bytes in regions the new creator never writes, which the span
        layout never reads.  Overflow beyond the pool cap is unlinked."""
        for oid in oids:
            path = self.object_path(oid)
            try:
                size = path.stat().st_size
            except OSError:
                continue
            pooled = self.directory / f"pool-{self._pool_seq}.obj"
            self._pool_seq += 1
            try:
                path.rename(pooled)
            except OSError:
                path.unlink(missing_ok=True)
                continue
            self._pool.append((size, pooled))
        while len(self._pool) > _POOL_MAX_FILES:
            _, stale = self._pool.pop(0)
            stale.unlink(missing_ok=True)

    # -- request handling --------------------------------------------------

    def _respond(self, conn: _Conn, status: Status, value: int = 0, blob: bytes = b""):
        try:
            conn.sock.sendall(wire.encode_response(status, value, blob))
        except OSError:
            self._drop_conn(conn)

    def _handle_request(self, conn: _Conn, op: int, oid: bytes, arg: int) -> None:
        if op == wire.Op.CREATE:
            result = self.state.create(oid, arg)
            self._retire_objects(result.evicted)
            if result.status is not Status.OK:
                self._respond(conn, result.status)
                return
            path = self._make_file(oid, arg)
            conn.creating.add(oid)
            self._respond(conn, Status.OK, arg, str(path).encode())
        elif op == wire.Op.SEAL:
            status = self.state.seal(oid)
            if status is Status.OK:
                conn.creating.discard(oid)
                self._wake_parked(oid)
            self._respond(conn, status)
        elif op == wire.Op.GET:
            status, size = self.state.get(oid)
            if status is Status.OK:
                conn.refs[oid] = conn.refs.get(oid, 0) + 1
                self._respond(
                    conn, Status.OK, size, str(self.object_path(oid)).encode()
                )
            else:
                deadline = time.monotonic_ns() + arg
                self._parked.append(_Parked(oid, conn, deadline))
        elif op == wire.Op.RELEASE:
            status = self.state.release(oid)
            if status is Status.OK:
                left = conn.refs.get(oid, 0) - 1
                if left > 0:
                    conn.refs[oid] = left
                else:
                    conn.refs.pop(oid, None)
            self._respond(conn, status)
        elif op == wire.Op.STATS:
            blob = json.dumps(self.state.stats()).encode()
            self._respond(conn, Status.OK, 0, blob)
        else:
            self._respond(conn, Status.BAD_REQUEST)

    def _wake_parked(self, oid: bytes) -> None:
        still_parked = []
        for p in self._parked:
            if p.oid != oid:
                still_parked.append(p)
                continue
            status, size = self.state.get(oid)
            if status is Status.OK:
                p.conn.refs[oid] = p.conn.refs.get(oid, 0) + 1
                self._respond(
                    p.conn, Status.OK, size, str(self.object_path(oid)).encode()
                )
            else:
                self._respond(p.conn, Status(status))
        # _respond may have dropped a connection (and pruned its parked
        # entries); keep only entries whose connection is still live.
        self._parked = [p for p in still_parked if p.conn.sock in self._conns]

    def _expire_parked(self, now_ns: int) -> None:
        still_parked = []
        for p in self._parked:
            if now_ns >= p.deadline_ns:
                self._respond(p.conn, Status.TIMEOUT)
            else:
                still_parked.append(p)
        self._parked = [p for p in still_parked if p.conn.sock in self._conns]

    def _drop_conn(self, conn: _Conn) -> None:
        if conn.sock not in self._conns:
            return
        del self._conns[conn.sock]
        try:
            self._selector.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        conn.sock.close()
        self._parked = [p for p in self._parked if p.conn is not conn]
        for oid, count in conn.refs.items():
            for _ in range(count):
                self.state.release(oid)
        for oid in conn.creating:
            if self.state.drop(oid) is Status.OK:
                self._retire_objects([oid])
        log.debug("dropped client; released %d pin group(s)", len(conn.refs))

    # -- the loop ------------------------------------------------------------

    def _loop_timeout(self) -> float | None:
        if not self._parked:
            return None
        now = time.monotonic_ns()
        soonest = min(p.deadline_ns for p in self._parked)
        return max(0.0, (soonest - now) / 1e9)

    def run(self) -> None:
        log.info(
            "store daemon serving %s (capacity %d bytes, directory %s)",
            self.socket_path,
            self.state.capacity_bytes,
            self.directory,
        )
        try:
            while not self._stopping:
                events = self._selector.select(self._loop_timeout())
                self._expire_parked(time.monotonic_ns())
                for key, _mask in events:
                    if key.data == "wake":
                        self._wake_r.recv(4096)
                    elif key.data == "listener":
                        sock, _ = self._listener.accept()
                        conn = _Conn(sock)
                        self._conns[sock] = conn
                        self._selector.register(sock, selectors.EVENT_READ, conn)
                    else:
                        self._service(key.data)
        finally:
            self._cleanup()

    def _service(self, conn: _Conn) -> None:
        try:
            chunk = conn.sock.recv(65536)
        except OSError:
            chunk = b""
        if not chunk:
            self._drop_conn(conn)
            return
        conn.inbuf += chunk
        while len(conn.inbuf) >= wire.REQUEST_BYTES:
            raw = bytes(conn.inbuf[: wire.REQUEST_BYTES])
            del conn.inbuf[: wire.REQUEST_BYTES]
            try:
                op, oid, arg = wire.decode_request(raw)
            except wire.WireFormatError:
                self._respond(conn, Status.BAD_REQUEST)
                continue
            self._handle_request(conn, op, oid, arg)

    def _cleanup(self) -> None:
        for conn in list(self._conns.values()):
            self._drop_conn(conn)
        self._selector.close()
        self._listener.close()
        self._wake_r.close()
        self._wake_w.close()
        self.socket_path.unlink(missing_ok=True)
        for path in self.directory.glob("*.obj"):
            path.unlink(missing_ok=True)
        try:
            self.directory.rmdir()
        except OSError:
            pass

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> "StoreDaemon":
        self._thread = threading.Thread(target=self.run, name="store-daemon", daemon=True)
        self._thread.start()
        return self

    def request_stop(self) -> None:
        self._stopping = True
        try:
            self._wake_w.send(b"\x00")
        except OSError:
            pass

    def stop(self) -> None:
        self.request_stop()
        if self._thread is not None:
            self._thread.join(timeout=10)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hprm-store", description="shared-memory object store daemon"
    )
    parser.add_argument("--socket", required=True, help="control socket path")
    parser.add_argument("--capacity-bytes", type=int, default=DEFAULT_CAPACITY)
    parser.add_argument("--eviction-fraction", type=float, default=0.2)
    parser.add_argument("--directory", default=None, help="backing file directory")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    daemon = StoreDaemon(
        args.socket,
        args.capacity_bytes,
        directory=args.directory,
        eviction_fraction=args.eviction_fraction,
    )
    signal.signal(signal.SIGTERM, lambda *_: daemon.request_stop())
    signal.signal(signal.SIGINT, lambda *_: daemon.request_stop())
    daemon.run()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
