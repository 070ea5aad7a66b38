"""Run-time coordination: registration, tag grants, and shutdown.

One daemon process tracks, per federate, three monotone tags:

* *announced* -- the earliest tag at which the federate might still
  produce an event (its NET report).  ``FOREVER`` means "nothing, ever,
  unless something arrives first"; ``NEVER`` means "not reported yet".
* *granted* -- the largest tag the daemon has authorized the federate to
  advance to (TAG_GRANT frames).
* *completed* -- the largest tag the federate has finished (LTC frames).

A federate may be granted tag G when no upstream federate can still emit
an event with tag <= G.  Each upstream announcement bounds that
federate's future output from below by the connection delay, so::

    grant(f) = min( delay(announced(u), d) for each in-edge (u -> f, d) )
    capped at announced(f)      -- never grant past what was asked for

Grants are emitted only when they move the federate strictly forward.
Federates with no inputs are granted exactly what they announce.
Resigned federates are fail-stopped: they are treated as if they had
announced ``FOREVER``, so their downstream peers are not wedged.

Shutdown: every announcement doubles as a quiescence report carrying a
queue-empty flag and cumulative sent/received message counts.  The
federation has drained exactly when every live federate reports an empty
queue and the global sent and received totals agree -- a message still
in flight always leaves the totals unequal, and a federate that went
busy again after reporting empty must first have received such a
message.  (Announcements alone cannot detect this: around a cycle with
positive delay, empty-queue federates keep ratcheting their
announcements upward by the cycle delay forever, never reaching
``FOREVER``.)  On quiescence, or on an explicit stop request, the daemon
broadcasts a stop tag one microstep past the latest reported activity.
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import threading
from dataclasses import dataclass
from enum import Enum

from hprm.tags import FOREVER, NEVER, NO_DELAY, Tag, bound_tag, delay_tag
from hprm.topology import Topology
from hprm.transport import (
    ConnectionOptions,
    Frame,
    FrameConnection,
    FrameListener,
    FrameType,
    TransportError,
)

log = logging.getLogger(__name__)

DEFAULT_STARTUP_OFFSET_NS = 100_000_000


class RtiProtocolError(Exception):
    """A federate broke the coordination protocol's rules."""


_PROGRESS = struct.Struct("<BQQ")


def encode_progress(queue_empty: bool, sent: int, received: int) -> bytes:
    """NET frame body: quiescence report riding along with the announcement."""
    return _PROGRESS.pack(1 if queue_empty else 0, sent, received)


def decode_progress(body: bytes) -> tuple[bool, int, int]:
    if not body:
        return False, 0, 0
    empty, sent, received = _PROGRESS.unpack_from(body)
    return bool(empty), sent, received


class Phase(Enum):
    REGISTERING = "registering"
    RUNNING = "running"
    STOPPING = "stopping"


@dataclass
class FederateRecord:
    fid: str
    joined: bool = False
    resigned: bool = False
    address: tuple[str, int] | None = None
    clock_at_join_ns: int = 0
    announced: Tag = NEVER
    granted: Tag = NEVER
    completed: Tag = NEVER
    reported_empty: bool = False
    sent_count: int = 0
    received_count: int = 0


@dataclass(frozen=True)
class Grant:
    fid: str
    tag: Tag


@dataclass(frozen=True)
class StartInfo:
    start_tag: Tag
    addresses: dict[str, tuple[str, int]]


@dataclass(frozen=True)
class StopInfo:
    stop_tag: Tag


class RtiState:
    """The coordination rules, free of sockets (see RtiServer for those)."""

    def __init__(self, topology: Topology, *, startup_offset_ns: int = DEFAULT_STARTUP_OFFSET_NS):
        self.topology = topology
        self.startup_offset_ns = startup_offset_ns
        self.phase = Phase.REGISTERING
        self.records = {fid: FederateRecord(fid) for fid in topology.federates}
        self.start_tag: Tag | None = None
        self._stop_info: StopInfo | None = None
        self._stop_pending = False

    def _record(self, fid: str) -> FederateRecord:
        record = self.records.get(fid)
        if record is None:
            raise RtiProtocolError(f"unknown federate {fid!r}")
        return record

    # -- registration ------------------------------------------------------

    def register(
        self, fid: str, clock_ns: int, address: tuple[str, int]
    ) -> StartInfo | None:
        """Record a join; returns start info once the roster is complete."""
        record = self._record(fid)
        if record.joined:
            raise RtiProtocolError(f"federate {fid!r} joined twice")
        if self.phase is not Phase.REGISTERING:
            raise RtiProtocolError(f"federate {fid!r} joined after start")
        record.joined = True
        record.clock_at_join_ns = clock_ns
        record.address = tuple(address)
        if not all(r.joined for r in self.records.values()):
            return None
        latest = max(r.clock_at_join_ns for r in self.records.values())
        self.start_tag = Tag(latest + self.startup_offset_ns, 0)
        self.phase = Phase.RUNNING
        log.info("all %d federates joined; start tag %r", len(self.records), self.start_tag)
        return StartInfo(
            self.start_tag,
            {fid: r.address for fid, r in self.records.items()},
        )

    # -- grants ---------------------------------------------------------------

    def grant_bound(self, fid: str) -> Tag:
        """Earliest tag an upstream federate might still deliver to fid."""
        bound = FOREVER
        for edge in self.topology.inputs_of(fid):
            upstream = self.records[edge.src]
            if upstream.resigned:
                continue  # fail-stopped: sends nothing further
            bound = min(bound, bound_tag(upstream.announced, edge.delay))
        return bound

    def _emit_grants(self, fids) -> list[Grant]:
        grants = []
        for fid in dict.fromkeys(fids):  # de-dup, order-preserving
            record = self.records[fid]
            if record.resigned or not record.announced.is_finite():
                continue  # nothing requested, or nobody to tell
            grant = min(self.grant_bound(fid), record.announced)
            if grant > record.granted:
                record.granted = grant
                grants.append(Grant(fid, grant))
        return grants

    def handle_net(
        self,
        fid: str,
        tag: Tag,
        *,
        queue_empty: bool = False,
        sent: int = 0,
        received: int = 0,
    ) -> list[Grant]:
        record = self._record(fid)
        if record.resigned:
            raise RtiProtocolError(f"{fid!r} announced after resigning")
        if tag == NEVER:
            raise RtiProtocolError(f"{fid!r} announced NEVER")
        if tag < record.announced:
            raise RtiProtocolError(
                f"{fid!r} announcement went backwards: {record.announced!r} -> {tag!r}"
            )
        if sent < record.sent_count or received < record.received_count:
            raise RtiProtocolError(f"{fid!r} message counters went backwards")
        record.announced = tag
        record.reported_empty = queue_empty
        record.sent_count = sent
        record.received_count = received
        return self._emit_grants([fid, *self.topology.downstream_ids(fid)])

    def handle_ltc(self, fid: str, tag: Tag) -> list[Grant]:
        record = self._record(fid)
        if not tag.is_finite():
            raise RtiProtocolError(f"{fid!r} completed a sentinel tag")
        if tag > record.granted:
            raise RtiProtocolError(
                f"{fid!r} completed {tag!r} beyond its grant {record.granted!r}"
            )
        if tag < record.completed:
            raise RtiProtocolError(
                f"{fid!r} completion went backwards: {record.completed!r} -> {tag!r}"
            )
        record.completed = tag
        return self._emit_grants(self.topology.downstream_ids(fid))

    def handle_resign(self, fid: str) -> list[Grant]:
        record = self._record(fid)
        if record.resigned:
            return []
        record.resigned = True
        record.announced = FOREVER
        return self._emit_grants(self.topology.downstream_ids(fid))

    # -- shutdown -----------------------------------------------------------------

    def autostop_ready(self) -> bool:
        """True when the federation is provably quiescent.

        Every live federate must have reported an empty queue, and the
        cumulative sent/received totals must agree so that nothing is in
        flight.  ``FOREVER`` announcements imply an empty queue too.
        """
        if self.phase is not Phase.RUNNING:
            return False
        records = self.records.values()
        if not all(
            r.resigned or r.reported_empty or r.announced == FOREVER
            for r in records
        ):
            return False
        return sum(r.sent_count for r in records) == sum(
            r.received_count for r in records
        )

    def request_stop(self, at: Tag | None = None) -> StopInfo | None:
        """Explicit stop; deferred until start if still registering."""
        if self.phase is Phase.REGISTERING:
            self._stop_pending = True
            return None
        return self.initiate_stop(at)

    def pending_stop(self) -> bool:
        return self._stop_pending

    def initiate_stop(self, at: Tag | None = None) -> StopInfo:
        """Pick the stop tag: one microstep past the latest known activity."""
        if self._stop_info is not None:
            return self._stop_info
        candidates = [self.start_tag if self.start_tag is not None else Tag(0, 0)]
        for record in self.records.values():
            for tag in (record.announced, record.completed):
                if tag.is_finite():
                    candidates.append(tag)
        if at is not None and at.is_finite():
            candidates.append(at)
        self._stop_info = StopInfo(delay_tag(max(candidates), NO_DELAY))
        self.phase = Phase.STOPPING
        log.info("stop tag %r", self._stop_info.stop_tag)
        return self._stop_info


class RtiServer:
    """Socket front end: one reader thread per federate, shared RtiState."""

    def __init__(
        self,
        topology: Topology,
        *,
        host: str = "127.0.0.1",
        port: int = 0,
        startup_offset_ns: int = DEFAULT_STARTUP_OFFSET_NS,
        options: ConnectionOptions | None = None,
    ):
        self.state = RtiState(topology, startup_offset_ns=startup_offset_ns)
        self.options = options or ConnectionOptions()
        self._listener = FrameListener(host, port, self.options)
        self._lock = threading.Lock()
        self._conns: dict[str, FrameConnection] = {}
        self._readers: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None
        self._stop_broadcast = False

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.address

    # -- frame helpers -------------------------------------------------------

    def _send(self, fid: str, frame: Frame) -> None:
        conn = self._conns.get(fid)
        if conn is None:
            return
        try:
            conn.send_frame(frame)
        except (TransportError, OSError):
            log.warning("lost connection to %s while sending", fid)

    def _send_grants(self, grants) -> None:
        for grant in grants:
            self._send(grant.fid, Frame(FrameType.TAG_GRANT, grant.tag))

    def _broadcast_stop(self, info: StopInfo) -> None:
        if self._stop_broadcast:
            return
        self._stop_broadcast = True
        for fid in list(self._conns):
            self._send(fid, Frame(FrameType.STOP, info.stop_tag))

    def _maybe_autostop(self) -> None:
        if not self._stop_broadcast and self.state.autostop_ready():
            self._broadcast_stop(self.state.initiate_stop())

    # -- per-federate reader ----------------------------------------------------

    def _register(self, conn: FrameConnection) -> str | None:
        frame = conn.recv_frame()
        if frame is None or frame.type != FrameType.JOIN:
            log.warning("connection sent %s before JOIN; dropping", frame and frame.type)
            conn.close()
            return None
        body = json.loads(frame.body.decode())
        fid = body["fid"]
        with self._lock:
            start = self.state.register(fid, body["clock_ns"], tuple(body["address"]))
            self._conns[fid] = conn
            if start is not None:
                payload = json.dumps(
                    {"addresses": {f: list(a) for f, a in start.addresses.items()}}
                ).encode()
                for joined_fid in list(self._conns):
                    self._send(
                        joined_fid,
                        Frame(FrameType.START, start.start_tag, body=payload),
                    )
                if self.state.pending_stop():
                    self._broadcast_stop(self.state.initiate_stop())
        return fid

    def _reader(self, conn: FrameConnection) -> None:
        fid = None
        try:
            fid = self._register(conn)
            if fid is None:
                return
            while True:
                frame = conn.recv_frame()
                if frame is None or frame.type == FrameType.RESIGN:
                    break
                with self._lock:
                    if frame.type == FrameType.NET:
                        empty, sent, received = decode_progress(frame.body)
                        self._send_grants(
                            self.state.handle_net(
                                fid,
                                frame.tag,
                                queue_empty=empty,
                                sent=sent,
                                received=received,
                            )
                        )
                        self._maybe_autostop()
                    elif frame.type == FrameType.LTC:
                        self._send_grants(self.state.handle_ltc(fid, frame.tag))
                    elif frame.type == FrameType.STOP:
                        info = self.state.request_stop(
                            frame.tag if frame.tag.is_finite() else None
                        )
                        if info is not None:
                            self._broadcast_stop(info)
                    elif frame.type == FrameType.PING:
                        conn.send_frame(frame)
                    else:
                        raise RtiProtocolError(
                            f"{fid!r} sent unexpected {FrameType(frame.type).name}"
                        )
        except (TransportError, RtiProtocolError, json.JSONDecodeError, OSError) as exc:
            log.error("federate %s violated the protocol: %s", fid, exc)
        finally:
            if fid is not None:
                with self._lock:
                    self._send_grants(self.state.handle_resign(fid))
                    self._maybe_autostop()
                    self._conns.pop(fid, None)
            conn.close()

    # -- lifecycle ------------------------------------------------------------------

    def _accept_loop(self) -> None:
        expected = len(self.state.records)
        for _ in range(expected):
            try:
                conn = self._listener.accept()
            except OSError:
                return  # listener closed
            reader = threading.Thread(
                target=self._reader, args=(conn,), name="rti-reader", daemon=True
            )
            reader.start()
            self._readers.append(reader)
        self._listener.close()

    def start(self) -> "RtiServer":
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="rti-accept", daemon=True
        )
        self._accept_thread.start()
        return self

    def serve_forever(self) -> None:
        self.start()
        self.join()

    def join(self, timeout: float | None = None) -> None:
        if self._accept_thread is not None:
            self._accept_thread.join(timeout)
        for reader in self._readers:
            reader.join(timeout)

    def close(self) -> None:
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for conn in self._conns.values():
                conn.close()
            self._conns.clear()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hprm-rti", description="federation coordination daemon"
    )
    parser.add_argument("--listen", default="127.0.0.1:0", help="host:port to bind")
    parser.add_argument("--topology", required=True, help="topology JSON file")
    parser.add_argument(
        "--federates", type=int, default=None, help="expected federate count (sanity check)"
    )
    parser.add_argument("--startup-offset-ms", type=float, default=100.0)
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    topology = Topology.load(args.topology)
    if args.federates is not None and args.federates != len(topology.federates):
        parser.error(
            f"--federates {args.federates} does not match topology "
            f"({len(topology.federates)} federates)"
        )
    host, _, port = args.listen.rpartition(":")
    server = RtiServer(
        topology,
        host=host or "127.0.0.1",
        port=int(port),
        startup_offset_ns=int(args.startup_offset_ms * 1e6),
    )
    # The bench harness scrapes this line to learn the bound port.
    print(f"rti listening on {server.address[0]}:{server.address[1]}", flush=True)
    server.serve_forever()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
