"""Wire protocol between fastgears, slowgears and parameter servers.

Frame layout (all integers little-endian)::

    u32 total frame length (including these 4 bytes)
    u8  kind
    ... payload

Payloads::

    INFER_REQ        u64 image_id
    INFER_RESP       u64 image_id, u8 status, vec dfv
    GRAD_PUSH        u64 image_id, vec grad
    PARAM_PULL_REQ   u32 n, n * str name
    PARAM_PULL_RESP  u32 n, n * (str name, u64 version, tensor)
    PARAM_GRAD_PUSH  u32 n, n * (str name, tensor)
    SHUTDOWN         (empty)

    str    = u16 byte length, UTF-8 bytes
    vec    = u32 element count, count * f32 (IEEE-754)
    tensor = u8 ndim, ndim * u32 dim, vec (count == product of dims)

The same bytes travel over the in-process queues and over TCP streams.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .rng import fmix64

log = logging.getLogger(__name__)

F32 = np.dtype("<f4")


class Kind(IntEnum):
    INFER_REQ = 1
    INFER_RESP = 2
    GRAD_PUSH = 3
    PARAM_PULL_REQ = 4
    PARAM_PULL_RESP = 5
    PARAM_GRAD_PUSH = 6
    SHUTDOWN = 7


class FramingError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


class Disconnected(ConnectionError):
    pass


STATUS_OK = 0
STATUS_NOT_FOUND = 1


class Endpoint(NamedTuple):
    role: str  # fastgear | slowgear | param_server
    index: int

    def __str__(self):
        return f"{self.role}{self.index}"


class Message:
    """Base for wire messages. Equality is byte equality of the encoding."""

    kind: Kind

    def __eq__(self, other):
        return isinstance(other, Message) and encode(self) == encode(other)

    def __hash__(self):
        return hash(encode(self))


@dataclass(eq=False)
class InferReq(Message):
    image_id: int
    kind = Kind.INFER_REQ


@dataclass(eq=False)
class InferResp(Message):
    image_id: int
    dfv: np.ndarray
    status: int = STATUS_OK
    kind = Kind.INFER_RESP


@dataclass(eq=False)
class GradPush(Message):
    image_id: int
    grad: np.ndarray
    kind = Kind.GRAD_PUSH


@dataclass(eq=False)
class ParamPullReq(Message):
    names: tuple
    kind = Kind.PARAM_PULL_REQ


@dataclass(eq=False)
class ParamPullResp(Message):
    # (name, version, tensor) triples
    entries: tuple
    kind = Kind.PARAM_PULL_RESP


@dataclass(eq=False)
class ParamGradPush(Message):
    # (name, tensor) pairs
    grads: tuple
    kind = Kind.PARAM_GRAD_PUSH


@dataclass(eq=False)
class Shutdown(Message):
    kind = Kind.SHUTDOWN


# encoding

def pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ProtocolError("name longer than 65535 bytes")
    return struct.pack("<H", len(b)) + b


def pack_vec(a) -> bytes:
    a = np.ascontiguousarray(a, dtype=F32).reshape(-1)
    return struct.pack("<I", a.size) + a.tobytes()


def pack_tensor(a) -> bytes:
    a = np.asarray(a)
    if a.ndim > 255:
        raise ProtocolError("tensor rank > 255")
    return struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape) + pack_vec(a)


def _payload(msg: Message) -> bytes:
    k = msg.kind
    if k == Kind.INFER_REQ:
        return struct.pack("<Q", msg.image_id)
    if k == Kind.INFER_RESP:
        return struct.pack("<QB", msg.image_id, msg.status) + pack_vec(msg.dfv)
    if k == Kind.GRAD_PUSH:
        return struct.pack("<Q", msg.image_id) + pack_vec(msg.grad)
    if k == Kind.PARAM_PULL_REQ:
        return struct.pack("<I", len(msg.names)) + b"".join(pack_str(n) for n in msg.names)
    if k == Kind.PARAM_PULL_RESP:
        parts = [struct.pack("<I", len(msg.entries))]
        for name, version, t in msg.entries:
            parts += [pack_str(name), struct.pack("<Q", version), pack_tensor(t)]
        return b"".join(parts)
    if k == Kind.PARAM_GRAD_PUSH:
        parts = [struct.pack("<I", len(msg.grads))]
        for name, t in msg.grads:
            parts += [pack_str(name), pack_tensor(t)]
        return b"".join(parts)
    if k == Kind.SHUTDOWN:
        return b""
    raise ProtocolError(f"unknown message kind {k!r}")


def encode(msg: Message) -> bytes:
    body = _payload(msg)
    return struct.pack("<IB", 5 + len(body), int(msg.kind)) + body


# decoding

class Reader:
    def __init__(self, buf: memoryview, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self.buf):
            raise FramingError("frame payload truncated")
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError(f"bad name encoding: {e}") from None

    def vec(self) -> np.ndarray:
        (n,) = self.unpack("<I")
        return np.frombuffer(self.take(4 * n), dtype=F32).astype(np.float32)

    def tensor(self) -> np.ndarray:
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        data = self.vec()
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise FramingError(f"tensor of shape {shape} carries {data.size} values")
        return data.reshape(shape)


def decode(frame: bytes) -> Message:
    buf = memoryview(frame)
    if len(buf) < 5:
        raise FramingError(f"frame of {len(buf)} bytes is shorter than the 5-byte header")
    length, tag = struct.unpack_from("<IB", buf)
    if length != len(buf):
        raise FramingError(f"length field says {length} bytes, got {len(buf)}")
    try:
        kind = Kind(tag)
    except ValueError:
        raise ProtocolError(f"unknown message kind tag {tag}") from None
    r = Reader(buf, 5)
    if kind == Kind.INFER_REQ:
        msg = InferReq(*r.unpack("<Q"))
    elif kind == Kind.INFER_RESP:
        image_id, status = r.unpack("<QB")
        msg = InferResp(image_id, r.vec(), status)
    elif kind == Kind.GRAD_PUSH:
        (image_id,) = r.unpack("<Q")
        msg = GradPush(image_id, r.vec())
    elif kind == Kind.PARAM_PULL_REQ:
        (n,) = r.unpack("<I")
        msg = ParamPullReq(tuple(r.string() for _ in range(n)))
    elif kind == Kind.PARAM_PULL_RESP:
        (n,) = r.unpack("<I")
        entries = []
        for _ in range(n):
            name = r.string()
            (version,) = r.unpack("<Q")
            entries.append((name, version, r.tensor()))
        msg = ParamPullResp(tuple(entries))
    elif kind == Kind.PARAM_GRAD_PUSH:
        (n,) = r.unpack("<I")
        msg = ParamGradPush(tuple((r.string(), r.tensor()) for _ in range(n)))
    else:
        msg = Shutdown()
    if r.pos != len(buf):
        raise FramingError(f"{len(buf) - r.pos} trailing bytes after payload")
    return msg


def route_image(image_id: int, num_slowgear: int) -> int:
    """Index of the slowgear owning ``image_id``: fmix64(id) mod W."""
    if num_slowgear < 1:
        raise ValueError("num_slowgear must be >= 1")
    return fmix64(image_id) % num_slowgear


# channels
#
# A server endpoint owns one Inbox of (frame, reply) items and processes it on
# a single thread. ``reply`` sends a frame back on the connection the request
# arrived on, so ordering is FIFO per (client, server) pair.

class Inbox:
    def __init__(self):
        self._q: queue.Queue = queue.Queue()
        self.closed = False

    def put(self, frame: bytes, reply) -> None:
        if self.closed:
            raise Disconnected("endpoint has shut down")
        self._q.put((frame, reply))

    def get(self, block: bool = True, timeout: float | None = None):
        return self._q.get(block, timeout)

    def empty(self) -> bool:
        return self._q.empty()


def serve(handler, inbox: Inbox) -> None:
    """Process frames from ``inbox`` until SHUTDOWN, which is processed after
    everything queued before it.

    ``handler.handle(msg)`` returns an optional reply message. When the inbox
    runs dry ``handler.idle()`` is called if present; ``handler.shutdown()``
    is called once on exit.
    """
    idle = getattr(handler, "idle", None)
    try:
        while True:
            try:
                frame, reply = inbox.get(block=False)
            except queue.Empty:
                if idle is not None:
                    idle()
                frame, reply = inbox.get()
            msg = decode(frame)
            if msg.kind == Kind.SHUTDOWN:
                break
            out = handler.handle(msg)
            if out is not None:
                try:
                    reply(encode(out))
                except (Disconnected, OSError):
                    log.warning("reply to closed peer dropped")
    finally:
        inbox.closed = True
        handler.shutdown()


class InprocConnection:
    """Client side of an in-process channel to a server Inbox."""

    def __init__(self, inbox: Inbox):
        self._inbox = inbox
        self._replies: queue.Queue = queue.Queue()

    def send(self, msg: Message) -> None:
        self._inbox.put(encode(msg), self._replies.put)

    def recv(self, timeout: float | None = None) -> Message:
        waited = 0.0
        while True:
            try:
                return decode(self._replies.get(timeout=0.05))
            except queue.Empty:
                if self._inbox.closed:
                    raise Disconnected("peer closed") from None
                waited += 0.05
                if timeout is not None and waited >= timeout:
                    raise TimeoutError("no reply") from None

    def close(self) -> None:
        pass


class DirectConnection:
    """Synchronous in-process channel: ``send`` runs the server handler
    immediately on the caller's thread. Used for deterministic runs."""

    def __init__(self, handler):
        self._handler = handler
        self._replies: deque = deque()
        self.closed = False

    def send(self, msg: Message) -> None:
        if self.closed:
            raise Disconnected("peer closed")
        msg = decode(encode(msg))
        if msg.kind == Kind.SHUTDOWN:
            self.closed = True
            self._handler.shutdown()
            return
        out = self._handler.handle(msg)
        if out is not None:
            self._replies.append(encode(out))

    def recv(self, timeout: float | None = None) -> Message:
        if not self._replies:
            raise Disconnected("no reply pending on synchronous channel")
        return decode(self._replies.popleft())

    def close(self) -> None:
        self.closed = True


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise Disconnected("stream closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", head)
    if length < 5:
        raise FramingError(f"bad frame length {length}")
    return head + _recv_exact(sock, length - 4)


class SocketConnection:
    """Client side of a TCP stream to a ``SocketServer``."""

    def __init__(self, address: tuple, timeout: float = 10.0):
        self._sock = socket.create_connection(address, timeout=timeout)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg: Message) -> None:
        try:
            self._sock.sendall(encode(msg))
        except OSError as e:
            raise Disconnected(str(e)) from e

    def recv(self, timeout: float | None = None) -> Message:
        self._sock.settimeout(timeout)
        try:
            return decode(read_frame(self._sock))
        except socket.timeout:
            raise TimeoutError("no reply") from None
        except OSError as e:
            raise Disconnected(str(e)) from e
        finally:
            self._sock.settimeout(None)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class SocketServer:
    """Accepts TCP streams and feeds their frames into one Inbox.

    One reader thread per accepted stream keeps per-connection FIFO order.
    """

    def __init__(self, inbox: Inbox, host: str = "127.0.0.1", port: int = 0):
        self.inbox = inbox
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()[:2]
        self._conns: list[socket.socket] = []
        self._stop = threading.Event()
        self._active = 0
        self._cv = threading.Condition()
        threading.Thread(target=self._accept_loop, daemon=True, name=f"accept-{self.address[1]}").start()

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            with self._cv:
                self._active += 1
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: socket.socket):
        lock = threading.Lock()

        def reply(frame: bytes):
            with lock:
                conn.sendall(frame)

        try:
            while True:
                frame = read_frame(conn)
                self.inbox.put(frame, reply)
        except (Disconnected, FramingError, OSError):
            pass
        finally:
            with self._cv:
                self._active -= 1
                self._cv.notify_all()

    def wait_drained(self, timeout: float = 10.0) -> bool:
        """Wait until every accepted stream has hit EOF, i.e. all frames its
        client sent are in the inbox."""
        with self._cv:
            return self._cv.wait_for(lambda: self._active == 0, timeout)

    def close(self):
        self._stop.set()
        for s in [self._listener, *self._conns]:
            try:
                s.close()
            except OSError:
                pass
