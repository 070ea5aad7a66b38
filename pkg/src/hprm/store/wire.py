"""Request/response codec for the store's control socket.

Control traffic carries only metadata -- object bytes go through the
shared mappings -- so the protocol is deliberately tiny.  Requests are
fixed 29 bytes: op u8 | object id (20 bytes) | u64 argument.  Responses
are a fixed 11-byte prefix (status u8 | u64 value | u16 blob length)
followed by the blob.  The blob is the object's backing-file path for
CREATE/GET and a JSON counters dump for STATS.  All integers little-endian.
"""

from __future__ import annotations

import struct
from enum import IntEnum

ID_BYTES = 20
_REQUEST = struct.Struct("<B20sQ")
_RESPONSE_PREFIX = struct.Struct("<BQH")

REQUEST_BYTES = _REQUEST.size            # 29
RESPONSE_PREFIX_BYTES = _RESPONSE_PREFIX.size  # 11


class Op(IntEnum):
    CREATE = 1   # arg = object size in bytes
    SEAL = 2
    GET = 3      # arg = timeout in nanoseconds
    RELEASE = 4
    STATS = 5


class WireFormatError(ValueError):
    pass


def encode_request(op: int, oid: bytes, arg: int = 0) -> bytes:
    if len(oid) != ID_BYTES:
        raise WireFormatError(f"object ids are {ID_BYTES} bytes, got {len(oid)}")
    return _REQUEST.pack(op, oid, arg)


def decode_request(buf: bytes | memoryview) -> tuple[int, bytes, int]:
    op, oid, arg = _REQUEST.unpack_from(buf)
    try:
        Op(op)
    except ValueError:
        raise WireFormatError(f"unknown store op {op}") from None
    return op, bytes(oid), arg


def encode_response(status: int, value: int = 0, blob: bytes = b"") -> bytes:
    if len(blob) > 0xFFFF:
        raise WireFormatError("response blob too large")
    return _RESPONSE_PREFIX.pack(status, value, len(blob)) + blob


def decode_response_prefix(buf: bytes | memoryview) -> tuple[int, int, int]:
    """(status, value, blob_length) from the fixed prefix."""
    return _RESPONSE_PREFIX.unpack_from(buf)
