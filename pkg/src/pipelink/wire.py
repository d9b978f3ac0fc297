"""Real-socket transport backend: framing plus per-link worker threads.

Wire format, little-endian throughout, length-prefixed:

    u32 frame_length            covers header + body
    u64 payload_id              16-byte header starts here
    u32 chunk_index
    u32 flags                   bit 0: last chunk, bit 1: decode class,
                                bit 2: control/shutdown
    ...                         chunk body (frame_length - 16 bytes)

The sender applies the same two-class, chunk-granular schedule as the
virtual-time backend: it owns a :class:`LinkQueue` guarded by a condition
variable, and the worker thread drains it one chunk at a time.  The receiver
reassembles chunks into payloads and hands completed payloads to a callback.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass

from .errors import ProtocolError
from .transport import Chunk, LinkPolicy, LinkQueue, Payload, PayloadClass

_LEN = struct.Struct("<I")
_HEADER = struct.Struct("<QII")

FLAG_LAST = 1
FLAG_DECODE = 2
FLAG_SHUTDOWN = 4

HEADER_BYTES = _HEADER.size  # 16


def encode_frame(payload_id: int, chunk_index: int, flags: int, body: bytes) -> bytes:
    header = _HEADER.pack(payload_id, chunk_index, flags)
    return _LEN.pack(len(header) + len(body)) + header + body


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        piece = sock.recv(n - len(buf))
        if not piece:
            return None
        buf.extend(piece)
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[int, int, int, bytes] | None:
    """One frame off the socket, or None on clean EOF."""
    raw_len = _recv_exact(sock, _LEN.size)
    if raw_len is None:
        return None
    (length,) = _LEN.unpack(raw_len)
    if length < HEADER_BYTES:
        raise ProtocolError(f"frame shorter than header ({length} bytes)")
    rest = _recv_exact(sock, length)
    if rest is None:
        raise ProtocolError("connection closed mid-frame")
    payload_id, chunk_index, flags = _HEADER.unpack(rest[:HEADER_BYTES])
    return payload_id, chunk_index, flags, rest[HEADER_BYTES:]


@dataclass
class ReceivedPayload:
    payload_id: int
    phase_class: PayloadClass
    body: bytes


class SocketLinkSender(threading.Thread):
    """Worker draining a LinkQueue onto a socket, one chunk per frame."""

    def __init__(
        self,
        sock: socket.socket,
        chunk_size: int | None,
        policy: LinkPolicy = LinkPolicy.DECODE_PRIORITY,
        name: str = "link-sender",
    ):
        super().__init__(name=name, daemon=True)
        self._sock = sock
        self._queue = LinkQueue(chunk_size=chunk_size, policy=policy)
        self._bodies: dict[int, bytes] = {}
        self._offsets: dict[int, int] = {}
        self._cond = threading.Condition()
        self._closing = False

    def send(self, payload: Payload, body: bytes) -> None:
        if len(body) != payload.size_bytes:
            raise ProtocolError(
                f"payload {payload.id}: body is {len(body)} bytes, "
                f"declared {payload.size_bytes}"
            )
        with self._cond:
            if self._closing:
                raise ProtocolError("sender is closing")
            self._queue.enqueue(payload)
            self._bodies[payload.id] = body
            self._offsets[payload.id] = 0
            self._cond.notify()

    def close(self) -> None:
        """Flush queued payloads, then send the shutdown frame and stop."""
        with self._cond:
            self._closing = True
            self._cond.notify()

    def _next_chunk(self) -> Chunk | None | bool:
        # Returns a chunk, None to wait, or False to finish.
        with self._cond:
            while True:
                chunk = self._queue.next_chunk()
                if chunk is not None:
                    return chunk
                if self._closing:
                    return False
                self._cond.wait()

    def run(self) -> None:
        try:
            while True:
                chunk = self._next_chunk()
                if chunk is False:
                    break
                assert isinstance(chunk, Chunk)
                offset = self._offsets[chunk.payload_id]
                body = self._bodies[chunk.payload_id]
                piece = body[offset : offset + chunk.size_bytes]
                flags = 0
                if chunk.is_last:
                    flags |= FLAG_LAST
                if chunk.phase_class is PayloadClass.DECODE:
                    flags |= FLAG_DECODE
                self._sock.sendall(
                    encode_frame(chunk.payload_id, chunk.index, flags, piece)
                )
                if chunk.is_last:
                    del self._bodies[chunk.payload_id]
                    del self._offsets[chunk.payload_id]
                else:
                    self._offsets[chunk.payload_id] = offset + chunk.size_bytes
            self._sock.sendall(encode_frame(0, 0, FLAG_SHUTDOWN, b""))
        except OSError:
            pass  # peer gone; receiver side surfaces the failure


class SocketLinkReceiver(threading.Thread):
    """Reassembles framed chunks into payloads and delivers them in order."""

    def __init__(self, sock: socket.socket, on_payload, name: str = "link-receiver"):
        super().__init__(name=name, daemon=True)
        self._sock = sock
        self._on_payload = on_payload
        self._partial: dict[int, bytearray] = {}
        self.failed = False

    def run(self) -> None:
        try:
            while True:
                frame = read_frame(self._sock)
                if frame is None:
                    self.failed = bool(self._partial)
                    return
                payload_id, chunk_index, flags, body = frame
                if flags & FLAG_SHUTDOWN:
                    return
                buf = self._partial.setdefault(payload_id, bytearray())
                buf.extend(body)
                if flags & FLAG_LAST:
                    del self._partial[payload_id]
                    phase = (
                        PayloadClass.DECODE
                        if flags & FLAG_DECODE
                        else PayloadClass.PREFILL
                    )
                    self._on_payload(
                        ReceivedPayload(payload_id, phase, bytes(buf))
                    )
        except (OSError, ProtocolError):
            self.failed = True


def loopback_pair() -> tuple[socket.socket, socket.socket]:
    """A connected TCP pair over 127.0.0.1."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    client = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    client.connect(listener.getsockname())
    server, _ = listener.accept()
    listener.close()
    client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    server.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return client, server
