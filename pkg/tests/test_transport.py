"""Frame codec and eager connection behavior over loopback."""

import socket
import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hprm.tags import FOREVER, NEVER, TIME_MAX, TIME_MIN, Tag
from hprm.transport import (
    HEADER_BYTES,
    ConnectionOptions,
    Frame,
    FrameConnection,
    FrameListener,
    FrameProtocolError,
    FrameType,
    OversizeFrameError,
    connect,
    decode_header,
    encode_header,
    ping_rtt,
    serve_echo,
)


def loopback_pair(options=None):
    listener = FrameListener(options=options)
    client_holder = {}

    def _connect():
        client_holder["conn"] = connect(listener.address, options)

    t = threading.Thread(target=_connect)
    t.start()
    server = listener.accept()
    t.join()
    listener.close()
    return client_holder["conn"], server


def test_header_is_exactly_22_bytes():
    assert HEADER_BYTES == 22
    frame = Frame(FrameType.TAGGED_MSG, Tag(5, 2), port=9, body=b"abc")
    assert len(encode_header(frame)) == 22


def test_header_golden_layout():
    # type=8, flags=0, time=0x0102030405060708, microstep=7, port=3, len=2
    frame = Frame(
        FrameType.TAGGED_MSG, Tag(0x0102030405060708, 7), port=3, body=b"hi"
    )
    expected = (
        b"\x08"
        + b"\x00"
        + b"\x08\x07\x06\x05\x04\x03\x02\x01"
        + b"\x07\x00\x00\x00"
        + b"\x03\x00\x00\x00"
        + b"\x02\x00\x00\x00"
    )
    assert encode_header(frame) == expected


def test_header_codec_round_trip_sentinels():
    for tag in (NEVER, FOREVER, Tag(-5, 0), Tag(0, 0)):
        header = encode_header(Frame(FrameType.NET, tag))
        ftype, flags, decoded, port, body_len = decode_header(header)
        assert decoded == tag
        assert (ftype, flags, port, body_len) == (FrameType.NET, 0, 0, 0)


finite_tags = st.builds(
    Tag,
    st.integers(min_value=TIME_MIN + 1, max_value=TIME_MAX - 1),
    st.integers(min_value=0, max_value=2**32 - 1),
)


@given(
    st.sampled_from(list(FrameType)),
    st.one_of(finite_tags, st.just(NEVER), st.just(FOREVER)),
    st.integers(min_value=0, max_value=2**32 - 1),
    st.binary(max_size=200),
)
@settings(max_examples=200)
def test_header_codec_identity(ftype, tag, port, body):
    frame = Frame(ftype, tag, port, body)
    decoded_type, _flags, decoded_tag, decoded_port, body_len = decode_header(
        encode_header(frame)
    )
    assert decoded_type == ftype
    assert decoded_tag == tag
    assert decoded_port == port
    assert body_len == len(body)


def test_decode_rejects_unknown_type():
    raw = struct.pack("<BBqIII", 77, 0, 0, 0, 0, 0)
    with pytest.raises(FrameProtocolError):
        decode_header(raw)


def test_decode_rejects_reserved_tag_encoding():
    raw = struct.pack("<BBqIII", FrameType.NET, 0, TIME_MAX, 0, 0, 0)
    with pytest.raises(FrameProtocolError):
        decode_header(raw)


def test_decode_rejects_absurd_length():
    raw = struct.pack("<BBqIII", FrameType.PING, 0, 0, 0, 0, 2**31 + 1)
    with pytest.raises(FrameProtocolError):
        decode_header(raw)


def test_round_trip_over_loopback():
    client, server = loopback_pair()
    try:
        frame = Frame(FrameType.TAGGED_MSG, Tag(123, 4), port=7, body=b"payload")
        client.send_frame(frame)
        received = server.recv_frame()
        assert received == frame
    finally:
        client.close()
        server.close()


def test_many_frames_in_order_single_buffer_allocation():
    client, server = loopback_pair()
    count = 10_000

    def _send():
        for seq in range(count):
            client.send_frame(
                Frame(FrameType.TAGGED_MSG, Tag(seq, 0), body=seq.to_bytes(4, "little"))
            )
        client.close()

    sender = threading.Thread(target=_send)
    sender.start()
    try:
        expected = 0  # independent sequence oracle
        while True:
            frame = server.recv_frame()
            if frame is None:
                break
            assert frame.tag.time == expected
            assert int.from_bytes(frame.body, "little") == expected
            expected += 1
        assert expected == count
        assert server.receive_buffer_allocations == 1
        assert server.frames_received == count
    finally:
        sender.join()
        server.close()


def test_oversize_send_rejected_before_touching_the_socket():
    client, server = loopback_pair()
    try:
        with pytest.raises(OversizeFrameError):
            client.send_frame(
                Frame(FrameType.TAGGED_MSG, Tag(0, 0), body=b"x" * 70_000)
            )
        assert client.frames_sent == 0
    finally:
        client.close()
        server.close()


def test_oversize_declared_body_rejected_on_receive():
    client, server = loopback_pair()
    try:
        raw = struct.pack("<BBqIII", FrameType.TAGGED_MSG, 0, 0, 0, 0, 66_000)
        client._sock.sendall(raw)
        with pytest.raises(OversizeFrameError):
            server.recv_frame()
    finally:
        client.close()
        server.close()


def test_eof_mid_frame_is_an_error_and_clean_eof_is_none():
    client, server = loopback_pair()
    client._sock.sendall(b"\x08\x00\x00")  # 3 bytes of a 22-byte header
    client.close()
    with pytest.raises(FrameProtocolError):
        server.recv_frame()
    server.close()

    client, server = loopback_pair()
    client.send_frame(Frame(FrameType.PING, Tag(0, 0)))
    client.close()
    assert server.recv_frame() is not None
    assert server.recv_frame() is None  # boundary EOF
    server.close()


def test_enlarged_buffer_carries_large_frames():
    options = ConnectionOptions(eager_buffer_bytes=2 * 2**20)
    client, server = loopback_pair(options)
    try:
        body = bytes(range(256)) * 4096  # 1 MiB
        client.send_frame(Frame(FrameType.TAGGED_MSG, Tag(1, 0), body=body))
        received = server.recv_frame()
        assert received.body == body
        assert server.receive_buffer_allocations == 1
    finally:
        client.close()
        server.close()


def test_nodelay_follows_coalescing_option():
    on = loopback_pair(ConnectionOptions(disable_coalescing=True))
    off = loopback_pair(ConnectionOptions(disable_coalescing=False))
    try:
        for conn in on:
            assert conn._sock.getsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY) != 0
        for conn in off:
            assert conn._sock.getsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY) == 0
    finally:
        for conn in (*on, *off):
            conn.close()


def test_ping_echo_round_trip():
    client, server = loopback_pair()
    echo_thread = threading.Thread(target=serve_echo, args=(server,))
    echo_thread.start()
    try:
        samples = ping_rtt(client, 50, warmup=5)
        assert len(samples) == 50
        assert all(s > 0 for s in samples)
    finally:
        client.close()
        echo_thread.join()
        server.close()
