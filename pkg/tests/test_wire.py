"""Message encodings, byte accounting, and both transports."""

import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudadapt.numcore import ParameterError, RngState
from cloudadapt.wire import (
    FRAME_OVERHEAD,
    TAG_DOWNLINK,
    TAG_UPLINK,
    ByteCounter,
    ChannelClosed,
    DecodeError,
    DownlinkMsg,
    Frame,
    UplinkMsg,
    count_bytes,
    decode,
    encode,
    frame_bytes,
    frame_for,
    inproc_pair,
    message_of,
    tcp_accept,
    tcp_connect,
    tcp_listen,
    uplink_nbytes,
)


def random_uplink(rng, count=None, width=None):
    count = count if count is not None else int(rng.integers(0, 9, None))
    width = width if width is not None else int(rng.integers(1, 17, None))
    return UplinkMsg(rng.normal(0, 1, (count, width)), rng.random(count) * 0.5)


def random_downlink(rng, version=None):
    widths = [int(w) for w in rng.integers(1, 9, 3)]
    layers = tuple(
        (rng.normal(0, 1, (a, b)), rng.normal(0, 1, (b,)))
        for a, b in zip(widths[:-1], widths[1:])
    )
    layout = "prefix" if rng.random(None) < 0.5 else "full_vector"
    pw = int(rng.integers(1, 9, None))
    k = int(rng.integers(1, pw + 1, None)) if layout == "prefix" else pw
    return DownlinkMsg(
        version if version is not None else int(rng.integers(0, 1000, None)),
        layers,
        layout,
        pw,
        rng.normal(0, 1, (k,)),
    )


# ---------------------------------------------------------------------------
# encoding sizes


def test_uplink_size_law():
    rng = RngState(0)
    for count, width in [(0, 4), (1, 1), (3, 16), (8, 16), (5, 2)]:
        msg = random_uplink(rng, count, width)
        raw = encode(msg)
        assert len(raw) == uplink_nbytes(count, width) == 9 + count * (8 * width + 8)


def test_empty_uplink_is_nine_bytes():
    msg = UplinkMsg(np.zeros((0, 16)), np.zeros(0))
    raw = encode(msg)
    assert len(raw) == 9
    back = decode(raw)
    assert back.count == 0 and back.width == 16


def test_uplink_layout_is_little_endian():
    msg = UplinkMsg(np.array([[1.0, 2.0]]), np.array([0.25]))
    raw = encode(msg)
    tag, count, width = struct.unpack("<BII", raw[:9])
    assert tag == TAG_UPLINK and count == 1 and width == 2
    vals = np.frombuffer(raw[9:], dtype="<f8")
    np.testing.assert_allclose(vals, [1.0, 2.0, 0.25], atol=0)


def test_uplink_validation():
    with pytest.raises(ParameterError):
        UplinkMsg(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ParameterError):
        UplinkMsg(np.zeros(3), np.zeros(3))


def test_downlink_version_validation():
    with pytest.raises(ParameterError):
        DownlinkMsg(-1, ((np.zeros((2, 2)), np.zeros(2)),), "full_vector", 2, np.zeros(2))
    with pytest.raises(ParameterError):
        DownlinkMsg(0, (), "diagonal", 2, np.zeros(2))


# ---------------------------------------------------------------------------
# round trips


def test_uplink_round_trip_bit_exact():
    rng = RngState(1)
    msg = random_uplink(rng, 5, 7)
    back = decode(encode(msg))
    assert back == msg
    assert back.inputs.tobytes() == msg.inputs.tobytes()


def test_downlink_round_trip_bit_exact():
    rng = RngState(2)
    msg = random_downlink(rng)
    back = decode(encode(msg))
    assert back == msg


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_round_trip_property(seed):
    rng = RngState(seed)
    up = random_uplink(rng)
    assert decode(encode(up)) == up
    down = random_downlink(rng)
    assert decode(encode(down)) == down


def test_frame_round_trip():
    rng = RngState(3)
    msg = random_uplink(rng, 2, 4)
    frame = frame_for(msg)
    assert frame.tag == TAG_UPLINK
    assert frame.size == FRAME_OVERHEAD + len(frame.payload)
    assert message_of(frame) == msg
    raw = frame_bytes(frame)
    tag, length = struct.unpack("<BI", raw[:5])
    assert tag == frame.tag and length == len(frame.payload)


# ---------------------------------------------------------------------------
# decode errors


def test_decode_unknown_tag():
    with pytest.raises(DecodeError):
        decode(b"\x7f\x00\x00\x00\x00")


def test_decode_truncations_report_offset():
    raw = encode(UplinkMsg(np.ones((2, 3)), np.zeros(2)))
    for cut in (0, 1, 5, 9, len(raw) - 1):
        with pytest.raises(DecodeError) as exc_info:
            decode(raw[:cut])
        assert exc_info.value.offset <= cut


def test_decode_trailing_bytes_rejected():
    raw = encode(UplinkMsg(np.ones((1, 2)), np.zeros(1)))
    with pytest.raises(DecodeError):
        decode(raw + b"\x00")


def test_decode_bad_uplink_count():
    raw = bytearray(encode(UplinkMsg(np.ones((2, 3)), np.zeros(2))))
    raw[1:5] = struct.pack("<I", 3)  # claim one more sample than present
    with pytest.raises(DecodeError):
        decode(bytes(raw))


def test_decode_downlink_shape_overflow():
    msg = DownlinkMsg(
        1, ((np.ones((2, 2)), np.zeros(2)),), "full_vector", 2, np.zeros(2)
    )
    raw = bytearray(encode(msg))
    raw[9:13] = struct.pack("<I", 10**6)  # explode layer 0's row count
    with pytest.raises(DecodeError):
        decode(bytes(raw))


def test_decode_downlink_bad_prompt_header():
    msg = DownlinkMsg(
        1, ((np.ones((2, 2)), np.zeros(2)),), "prefix", 4, np.zeros(2)
    )
    raw = bytearray(encode(msg))
    raw[-17] = 9  # layout code byte (before width u32, count u32, 2 reals)
    with pytest.raises(DecodeError):
        decode(bytes(raw))


@given(st.integers(0, 2**32 - 1), st.data())
@settings(max_examples=100, deadline=None)
def test_decode_corruption_never_crashes(seed, data):
    # any single-byte flip either still parses or raises DecodeError;
    # no other exception type may escape
    rng = RngState(seed)
    msg = random_uplink(rng) if seed % 2 == 0 else random_downlink(rng)
    raw = bytearray(encode(msg))
    pos = data.draw(st.integers(0, len(raw) - 1))
    val = data.draw(st.integers(0, 255))
    raw[pos] = val
    try:
        decode(bytes(raw))
    except DecodeError:
        pass


# ---------------------------------------------------------------------------
# byte accounting


def test_frame_cost_hand_values():
    f = Frame(TAG_UPLINK, b"x" * 100)
    c = ByteCounter()
    count_bytes(c, "up", f)
    assert c.uplink_bytes == 105 and c.downlink_bytes == 0
    count_bytes(c, "down", Frame(TAG_DOWNLINK, b""))
    assert c.downlink_bytes == 5
    assert c.total == 110
    with pytest.raises(ParameterError):
        count_bytes(c, "sideways", f)


def test_counter_accumulates_scripted_exchange():
    rng = RngState(4)
    msgs = [random_uplink(rng, 3, 6), random_downlink(rng), random_uplink(rng, 0, 6)]
    c = ByteCounter()
    a, b = inproc_pair(c)
    expect_up = expect_down = 0
    for m in msgs:
        f = frame_for(m)
        if isinstance(m, UplinkMsg):
            a.send(m)
            expect_up += f.size
            assert b.recv(timeout=1.0) == m
        else:
            b.send(m)
            expect_down += f.size
            assert a.recv(timeout=1.0) == m
    assert c.uplink_bytes == expect_up
    assert c.downlink_bytes == expect_down


# ---------------------------------------------------------------------------
# in-process transport


def test_inproc_fifo_order():
    a, b = inproc_pair()
    rng = RngState(5)
    sent = [random_uplink(rng, i, 3) for i in range(5)]
    for m in sent:
        a.send(m)
    got = [b.recv(timeout=1.0) for _ in sent]
    assert got == sent


def test_inproc_try_recv():
    a, b = inproc_pair()
    assert b.try_recv() is None
    m = random_uplink(RngState(6), 1, 2)
    a.send(m)
    assert b.try_recv() == m
    assert b.try_recv() is None


def test_inproc_timeout():
    _, b = inproc_pair()
    with pytest.raises(TimeoutError):
        b.recv(timeout=0.05)


def test_inproc_close_semantics():
    a, b = inproc_pair()
    m = random_uplink(RngState(7), 2, 2)
    a.send(m)
    a.close()
    # already-queued frames still drain, then the channel reports closed
    assert b.recv(timeout=1.0) == m
    with pytest.raises(ChannelClosed):
        b.recv(timeout=1.0)
    with pytest.raises(ChannelClosed):
        b.try_recv()
    with pytest.raises(ChannelClosed):
        b.send(m)


def test_inproc_bounded_capacity_blocks_until_drained():
    a, b = inproc_pair(capacity=2)
    m = random_uplink(RngState(8), 1, 2)
    a.send(m)
    a.send(m)
    done = threading.Event()

    def push():
        a.send(m)  # blocks until a slot opens
        done.set()

    t = threading.Thread(target=push)
    t.start()
    assert not done.wait(0.1)
    assert b.recv(timeout=1.0) == m
    assert done.wait(1.0)
    t.join()


# ---------------------------------------------------------------------------
# tcp transport


@pytest.fixture
def tcp_pair():
    server = tcp_listen()
    port = server.getsockname()[1]
    counter = ByteCounter()
    ends = {}

    def accept():
        ends["srv"] = tcp_accept(server, counter)

    t = threading.Thread(target=accept)
    t.start()
    cli = tcp_connect("127.0.0.1", port, counter)
    t.join()
    yield cli, ends["srv"], counter
    cli.close()
    ends["srv"].close()
    server.close()


def test_tcp_round_trip(tcp_pair):
    cli, srv, _ = tcp_pair
    rng = RngState(9)
    up = random_uplink(rng, 4, 8)
    cli.send(up)
    assert srv.recv(timeout=5.0) == up
    down = random_downlink(rng)
    srv.send(down)
    assert cli.recv(timeout=5.0) == down


def test_tcp_try_recv_polls_without_blocking(tcp_pair):
    cli, srv, _ = tcp_pair
    assert srv.try_recv() is None
    m = random_uplink(RngState(10), 1, 3)
    cli.send(m)
    got = None
    for _ in range(100):
        got = srv.try_recv()
        if got is not None:
            break
    assert got == m


def test_tcp_counts_match_inproc_on_same_script(tcp_pair):
    # the same message sequence must cost the same bytes on both transports
    cli, srv, tcp_counter = tcp_pair
    rng = RngState(11)
    script = [random_uplink(rng, 3, 5), random_downlink(rng), random_uplink(rng, 1, 5)]

    in_counter = ByteCounter()
    a, b = inproc_pair(in_counter)
    for m in script:
        if isinstance(m, UplinkMsg):
            a.send(m)
            b.recv(timeout=1.0)
            cli.send(m)
            srv.recv(timeout=5.0)
        else:
            b.send(m)
            a.recv(timeout=1.0)
            srv.send(m)
            cli.recv(timeout=5.0)
    assert tcp_counter.uplink_bytes == in_counter.uplink_bytes
    assert tcp_counter.downlink_bytes == in_counter.downlink_bytes


def test_tcp_half_close_still_delivers(tcp_pair):
    cli, srv, _ = tcp_pair
    m = random_uplink(RngState(12), 2, 4)
    cli.send(m)
    cli.close_write()
    assert srv.recv(timeout=5.0) == m
    with pytest.raises(ChannelClosed):
        srv.recv(timeout=5.0)
    # server can still answer after the half-close
    down = random_downlink(RngState(13))
    srv.send(down)
    assert cli.recv(timeout=5.0) == down


def test_tcp_timeout(tcp_pair):
    cli, srv, _ = tcp_pair
    with pytest.raises(TimeoutError):
        srv.recv(timeout=0.05)
