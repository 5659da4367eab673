"""Binary link protocol, byte accounting, and the two transports.

Message encodings (all integers unsigned little-endian, all reals 64-bit
little-endian):

    uplink    [0x01][count u32][width u32] then per sample:
              [width reals (the original, un-prompted input)][v_unc real]
              -> 9 + count * (8*width + 8) bytes; carries no labels

    downlink  [0x02][version u32][n_layers u32] then per layer:
              [in u32][out u32][in*out reals row-major][out reals]
              then the prompt block:
              [layout u8: 0 full_vector, 1 prefix][width u32][count u32][count reals]

On the channel each message travels as a frame:

    [tag u8][length u32 = len(body)][body]

where body is the message encoding minus its leading tag, so a frame costs
5 + len(body) bytes.  Both transports count exactly that on send.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numcore import Array, ParameterError, as_f64

TAG_UPLINK = 0x01
TAG_DOWNLINK = 0x02

_LAYOUT_CODES = {"full_vector": 0, "prefix": 1}
_LAYOUT_NAMES = {v: k for k, v in _LAYOUT_CODES.items()}

FRAME_OVERHEAD = 5  # tag byte + u32 length


class DecodeError(ValueError):
    """Malformed bytes; .offset points at the failing position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class ChannelClosed(Exception):
    """The peer is gone and nothing more will arrive."""


# ---------------------------------------------------------------------------
# messages


@dataclass(eq=False)
class UplinkMsg:
    inputs: Array           # (count, width) original device inputs
    scores: Array           # (count,) per-sample v_unc

    def __post_init__(self):
        self.inputs = as_f64(self.inputs)
        self.scores = as_f64(self.scores)
        if self.inputs.ndim != 2 or self.scores.ndim != 1:
            raise ParameterError(
                f"uplink needs (n, width) inputs and (n,) scores, got {self.inputs.shape}, {self.scores.shape}"
            )
        if self.inputs.shape[0] != self.scores.shape[0]:
            raise ParameterError(
                f"{self.inputs.shape[0]} inputs vs {self.scores.shape[0]} scores"
            )

    @property
    def count(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def width(self) -> int:
        return int(self.inputs.shape[1])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, UplinkMsg)
            and self.inputs.shape == other.inputs.shape
            and self.inputs.tobytes() == other.inputs.tobytes()
            and self.scores.tobytes() == other.scores.tobytes()
        )


@dataclass(eq=False)
class DownlinkMsg:
    version: int
    layers: tuple           # ((W, b), ...) student parameters
    prompt_layout: str
    prompt_width: int
    prompt_values: Array

    def __post_init__(self):
        if self.version < 0:
            raise ParameterError(f"version must be >= 0, got {self.version}")
        if self.prompt_layout not in _LAYOUT_CODES:
            raise ParameterError(f"unknown prompt layout {self.prompt_layout!r}")
        self.layers = tuple((as_f64(w), as_f64(b)) for w, b in self.layers)
        self.prompt_values = as_f64(self.prompt_values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DownlinkMsg):
            return False
        if self.version != other.version or self.prompt_layout != other.prompt_layout:
            return False
        if self.prompt_width != other.prompt_width:
            return False
        if self.prompt_values.tobytes() != other.prompt_values.tobytes():
            return False
        if len(self.layers) != len(other.layers):
            return False
        for (w1, b1), (w2, b2) in zip(self.layers, other.layers):
            if w1.shape != w2.shape or w1.tobytes() != w2.tobytes():
                return False
            if b1.tobytes() != b2.tobytes():
                return False
        return True


def uplink_nbytes(count: int, width: int) -> int:
    """Encoded size of an uplink message: affine in the sample count."""
    return 9 + count * (8 * width + 8)


# ---------------------------------------------------------------------------
# encode / decode


def _f64_bytes(a: Array) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode_uplink(msg: UplinkMsg) -> bytes:
    head = struct.pack("<BII", TAG_UPLINK, msg.count, msg.width)
    block = np.empty((msg.count, msg.width + 1))
    block[:, : msg.width] = msg.inputs
    block[:, msg.width] = msg.scores
    return head + _f64_bytes(block)


def encode_downlink(msg: DownlinkMsg) -> bytes:
    parts = [struct.pack("<BII", TAG_DOWNLINK, msg.version, len(msg.layers))]
    for w, b in msg.layers:
        if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
            raise ParameterError(f"bad layer shapes {w.shape}, {b.shape}")
        parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
        parts.append(_f64_bytes(w))
        parts.append(_f64_bytes(b))
    parts.append(
        struct.pack(
            "<BII",
            _LAYOUT_CODES[msg.prompt_layout],
            msg.prompt_width,
            msg.prompt_values.shape[0],
        )
    )
    parts.append(_f64_bytes(msg.prompt_values))
    return b"".join(parts)


def encode(msg) -> bytes:
    if isinstance(msg, UplinkMsg):
        return encode_uplink(msg)
    if isinstance(msg, DownlinkMsg):
        return encode_downlink(msg)
    raise ParameterError(f"cannot encode {type(msg).__name__}")


class _Reader:
    """Cursor over a byte string that fails loudly with the offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError(
                f"truncated while reading {what}: need {n} bytes, have {len(self.data) - self.pos}",
                self.pos,
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def reals(self, n: int, what: str) -> Array:
        raw = self.take(8 * n, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def done(self, what: str):
        if self.pos != len(self.data):
            raise DecodeError(
                f"{len(self.data) - self.pos} trailing bytes after {what}", self.pos
            )


def decode(data: bytes):
    """Parse one encoded message; raises DecodeError on any malformation."""
    r = _Reader(bytes(data))
    tag = r.u8("message tag")
    if tag == TAG_UPLINK:
        count = r.u32("sample count")
        width = r.u32("input width")
        if count and width == 0:
            raise DecodeError("zero input width with nonzero sample count", 5)
        need = count * (8 * width + 8)
        if len(data) - r.pos != need:
            raise DecodeError(
                f"uplink body should hold {need} bytes for {count} samples of width {width}, "
                f"have {len(data) - r.pos}",
                r.pos,
            )
        block = r.reals(count * (width + 1), "uplink samples").reshape(count, width + 1)
        r.done("uplink message")
        return UplinkMsg(block[:, :width].copy(), block[:, width].copy())
    if tag == TAG_DOWNLINK:
        version = r.u32("version")
        n_layers = r.u32("layer count")
        layers = []
        for i in range(n_layers):
            rows = r.u32(f"layer {i} rows")
            cols = r.u32(f"layer {i} cols")
            if rows == 0 or cols == 0:
                raise DecodeError(f"layer {i} has empty shape {rows}x{cols}", r.pos - 8)
            if r.pos + 8 * (rows * cols + cols) > len(data):
                raise DecodeError(
                    f"layer {i} shape {rows}x{cols} exceeds remaining bytes", r.pos - 8
                )
            w = r.reals(rows * cols, f"layer {i} weights").reshape(rows, cols)
            b = r.reals(cols, f"layer {i} biases")
            layers.append((w, b))
        layout_code = r.u8("prompt layout")
        if layout_code not in _LAYOUT_NAMES:
            raise DecodeError(f"unknown prompt layout code {layout_code}", r.pos - 1)
        p_width = r.u32("prompt width")
        p_count = r.u32("prompt value count")
        layout = _LAYOUT_NAMES[layout_code]
        if layout == "full_vector" and p_count != p_width:
            raise DecodeError(
                f"full_vector prompt should hold {p_width} values, header says {p_count}",
                r.pos - 4,
            )
        if layout == "prefix" and p_count > p_width:
            raise DecodeError(
                f"prefix prompt longer than its width: {p_count} > {p_width}", r.pos - 4
            )
        values = r.reals(p_count, "prompt values")
        r.done("downlink message")
        return DownlinkMsg(version, tuple(layers), layout, p_width, values)
    raise DecodeError(f"unknown message tag 0x{tag:02x}", 0)


# ---------------------------------------------------------------------------
# frames and byte accounting


@dataclass(frozen=True)
class Frame:
    tag: int
    payload: bytes          # message encoding minus the leading tag byte

    @property
    def size(self) -> int:
        return FRAME_OVERHEAD + len(self.payload)


def frame_for(msg) -> Frame:
    raw = encode(msg)
    return Frame(raw[0], raw[1:])


def message_of(frame: Frame):
    return decode(bytes([frame.tag]) + frame.payload)


def frame_bytes(frame: Frame) -> bytes:
    return struct.pack("<BI", frame.tag, len(frame.payload)) + frame.payload


@dataclass
class ByteCounter:
    uplink_bytes: int = 0
    downlink_bytes: int = 0

    @property
    def total(self) -> int:
        return self.uplink_bytes + self.downlink_bytes


def count_bytes(counter: ByteCounter, direction: str, frame: Frame) -> ByteCounter:
    """Accumulate one frame's on-wire size into the named direction."""
    size = FRAME_OVERHEAD + len(frame.payload)
    if direction == "up":
        counter.uplink_bytes += size
    elif direction == "down":
        counter.downlink_bytes += size
    else:
        raise ParameterError(f"direction must be 'up' or 'down', got {direction!r}")
    return counter


def _direction_of(tag: int) -> str:
    if tag == TAG_UPLINK:
        return "up"
    if tag == TAG_DOWNLINK:
        return "down"
    raise ParameterError(f"unknown frame tag 0x{tag:02x}")


# ---------------------------------------------------------------------------
# in-process transport


class _Pipe:
    """One direction of the in-process channel: a bounded FIFO of frames."""

    def __init__(self, capacity: int):
        self.frames: deque[Frame] = deque()
        self.capacity = capacity
        self.cond = threading.Condition()
        self.closed = False


class InProcEnd:
    """One endpoint of an in-process channel pair."""

    def __init__(self, out_pipe: _Pipe, in_pipe: _Pipe, counter: ByteCounter | None):
        self._out = out_pipe
        self._in = in_pipe
        self._counter = counter

    def send_frame(self, frame: Frame):
        with self._out.cond:
            if self._out.closed:
                raise ChannelClosed("send on a closed channel")
            while len(self._out.frames) >= self._out.capacity:
                self._out.cond.wait()
                if self._out.closed:
                    raise ChannelClosed("send on a closed channel")
            if self._counter is not None:
                count_bytes(self._counter, _direction_of(frame.tag), frame)
            self._out.frames.append(frame)
            self._out.cond.notify_all()

    def recv_frame(self, timeout: float | None = None) -> Frame:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._in.cond:
            while not self._in.frames:
                if self._in.closed:
                    raise ChannelClosed("recv on a closed, drained channel")
                if deadline is None:
                    self._in.cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TimeoutError("recv timed out")
                    self._in.cond.wait(remaining)
            frame = self._in.frames.popleft()
            self._in.cond.notify_all()
            return frame

    def try_recv_frame(self) -> Frame | None:
        with self._in.cond:
            if self._in.frames:
                frame = self._in.frames.popleft()
                self._in.cond.notify_all()
                return frame
            if self._in.closed:
                raise ChannelClosed("recv on a closed, drained channel")
            return None

    def send(self, msg):
        self.send_frame(frame_for(msg))

    def recv(self, timeout: float | None = None):
        return message_of(self.recv_frame(timeout))

    def try_recv(self):
        frame = self.try_recv_frame()
        return None if frame is None else message_of(frame)

    def close(self):
        for pipe in (self._out, self._in):
            with pipe.cond:
                pipe.closed = True
                pipe.cond.notify_all()


def inproc_pair(counter: ByteCounter | None = None, capacity: int = 65536):
    """Two connected in-process endpoints sharing one byte counter."""
    a_to_b = _Pipe(capacity)
    b_to_a = _Pipe(capacity)
    return InProcEnd(a_to_b, b_to_a, counter), InProcEnd(b_to_a, a_to_b, counter)


# ---------------------------------------------------------------------------
# TCP transport


class TcpEnd:
    """One endpoint of a TCP channel; frames travel verbatim on the socket."""

    def __init__(self, sock: socket.socket, counter: ByteCounter | None):
        self._sock = sock
        self._counter = counter
        self._buf = bytearray()
        self._eof = False

    def send_frame(self, frame: Frame):
        if self._counter is not None:
            count_bytes(self._counter, _direction_of(frame.tag), frame)
        try:
            self._sock.sendall(frame_bytes(frame))
        except (BrokenPipeError, ConnectionResetError, OSError) as exc:
            raise ChannelClosed(f"send failed: {exc}") from exc

    def _fill(self, timeout: float | None) -> bool:
        """Pull whatever is available into the buffer; False on EOF."""
        if self._eof:
            return False
        self._sock.settimeout(timeout)
        try:
            chunk = self._sock.recv(65536)
        except (TimeoutError, BlockingIOError, InterruptedError):
            # nothing available right now; timeout 0 surfaces as BlockingIOError
            return True
        except OSError:
            self._eof = True
            return False
        if not chunk:
            self._eof = True
            return False
        self._buf.extend(chunk)
        return True

    def _parse_frame(self) -> Frame | None:
        if len(self._buf) < FRAME_OVERHEAD:
            return None
        tag, length = struct.unpack("<BI", bytes(self._buf[:FRAME_OVERHEAD]))
        if len(self._buf) < FRAME_OVERHEAD + length:
            return None
        payload = bytes(self._buf[FRAME_OVERHEAD : FRAME_OVERHEAD + length])
        del self._buf[: FRAME_OVERHEAD + length]
        return Frame(tag, payload)

    def recv_frame(self, timeout: float | None = None) -> Frame:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            frame = self._parse_frame()
            if frame is not None:
                return frame
            if self._eof:
                if self._buf:
                    raise DecodeError("connection dropped mid-frame", len(self._buf))
                raise ChannelClosed("peer closed the connection")
            step = None
            if deadline is not None:
                step = deadline - time.monotonic()
                if step <= 0:
                    raise TimeoutError("recv timed out")
            self._fill(step if step is not None else 1.0)

    def try_recv_frame(self) -> Frame | None:
        frame = self._parse_frame()
        if frame is not None:
            return frame
        self._fill(0.0)
        frame = self._parse_frame()
        if frame is None and self._eof:
            if self._buf:
                raise DecodeError("connection dropped mid-frame", len(self._buf))
            raise ChannelClosed("peer closed the connection")
        return frame

    def send(self, msg):
        self.send_frame(frame_for(msg))

    def recv(self, timeout: float | None = None):
        return message_of(self.recv_frame(timeout))

    def try_recv(self):
        frame = self.try_recv_frame()
        return None if frame is None else message_of(frame)

    def close_write(self):
        """Half-close: signal no more outgoing frames, keep reading."""
        try:
            self._sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def tcp_listen(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    """Bound, listening server socket; port 0 picks an ephemeral port."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv

def tcp_accept(server: socket.socket, counter: ByteCounter | None = None,
               timeout: float | None = 10.0) -> TcpEnd:
    server.settimeout(timeout)
    conn, _ = server.accept()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpEnd(conn, counter)


def tcp_connect(host: str, port: int, counter: ByteCounter | None = None,
                timeout: float = 10.0) -> TcpEnd:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpEnd(sock, counter)
