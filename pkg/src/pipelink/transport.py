"""Directed links as serial resources with chunked, decode-priority sending.

A link carries one chunk at a time.  Prefill activations are split into
fixed-size chunks so that small decode payloads, which are never split, can
preempt at the next chunk boundary instead of waiting behind the whole
transfer.  Setting ``chunk_size=None`` disables chunking and recovers the
head-of-line-blocking baseline.

The same queue mechanics back two transports: the virtual-time driver below
(used by the simulator and by :func:`replay_link`) and the socket workers in
:mod:`pipelink.wire`.
"""

from __future__ import annotations

import csv
import enum
import heapq
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, ProtocolError
from .profiles import LinkProfile

DEFAULT_CHUNK_SIZE = 262_144  # 256 KiB: ~21 ms of blocking at 100 Mbps

NS_PER_S = 1_000_000_000


def s_to_ns(seconds: float) -> int:
    return round(seconds * NS_PER_S)


class PayloadClass(enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class LinkPolicy(enum.Enum):
    DECODE_PRIORITY = "decode_priority"
    FCFS = "fcfs"


@dataclass(frozen=True)
class Payload:
    """One intermediate result to move across a link."""

    id: int
    phase_class: PayloadClass
    size_bytes: int
    micro_batch_id: int
    enqueue_time: int  # ns

    def __post_init__(self) -> None:
        if self.size_bytes < 1:
            raise ConfigError(f"payload {self.id}: size must be >= 1 byte")


@dataclass(frozen=True)
class Chunk:
    payload_id: int
    index: int
    size_bytes: int
    is_last: bool
    phase_class: PayloadClass


class LinkQueue:
    """Two-class outbound queue for one directed link.

    ``next_chunk`` yields the next chunk to put on the wire: the whole head
    decode payload if any decode work is queued, otherwise the next slice of
    the head prefill payload.  Queue state advances as chunks are taken, so a
    decode arrival between two prefill chunks preempts at that boundary.
    """

    def __init__(
        self,
        chunk_size: int | float | None = DEFAULT_CHUNK_SIZE,
        policy: LinkPolicy = LinkPolicy.DECODE_PRIORITY,
    ):
        if chunk_size is not None and not math.isinf(chunk_size):
            if int(chunk_size) < 1:
                raise ConfigError("chunk_size must be >= 1 byte")
            self.chunk_size: int | None = int(chunk_size)
        else:
            self.chunk_size = None  # unchunked
        self.policy = policy
        self._decode: deque[Payload] = deque()
        self._prefill: deque[Payload] = deque()
        self._fcfs: deque[Payload] = deque()
        self._seen_ids: set[int] = set()
        self._head_offset = 0  # bytes of the head payload already chunked out
        self._head_index = 0

    def __len__(self) -> int:
        if self.policy is LinkPolicy.FCFS:
            return len(self._fcfs)
        return len(self._decode) + len(self._prefill)

    def enqueue(self, payload: Payload) -> None:
        if payload.id in self._seen_ids:
            raise ProtocolError(f"payload {payload.id} already enqueued on this link")
        self._seen_ids.add(payload.id)
        if self.policy is LinkPolicy.FCFS:
            self._fcfs.append(payload)
        elif payload.phase_class is PayloadClass.DECODE:
            self._decode.append(payload)
        else:
            self._prefill.append(payload)

    def _take_whole(self, queue: deque[Payload]) -> Chunk:
        p = queue.popleft()
        return Chunk(
            payload_id=p.id,
            index=0,
            size_bytes=p.size_bytes,
            is_last=True,
            phase_class=p.phase_class,
        )

    def _take_slice(self, queue: deque[Payload]) -> Chunk:
        p = queue[0]
        assert self.chunk_size is not None
        remaining = p.size_bytes - self._head_offset
        size = min(self.chunk_size, remaining)
        chunk = Chunk(
            payload_id=p.id,
            index=self._head_index,
            size_bytes=size,
            is_last=size == remaining,
            phase_class=p.phase_class,
        )
        if chunk.is_last:
            queue.popleft()
            self._head_offset = 0
            self._head_index = 0
        else:
            self._head_offset += size
            self._head_index += 1
        return chunk

    def next_chunk(self) -> Chunk | None:
        if self.policy is LinkPolicy.FCFS:
            if not self._fcfs:
                return None
            head = self._fcfs[0]
            if head.phase_class is PayloadClass.DECODE or self.chunk_size is None:
                return self._take_whole(self._fcfs)
            return self._take_slice(self._fcfs)
        if self._decode:
            # Decode payloads are small and never split.
            return self._take_whole(self._decode)
        if self._prefill:
            if self.chunk_size is None:
                return self._take_whole(self._prefill)
            return self._take_slice(self._prefill)
        return None


@dataclass(frozen=True)
class LinkEvent:
    """One row of the emission/delivery log."""

    time_ns: int
    link: str
    payload_id: int
    chunk_index: int
    size_bytes: int
    phase_class: PayloadClass
    event: str  # enqueue | emit | sent | deliver

    def as_row(self) -> list:
        return [
            f"{self.time_ns / NS_PER_S:.6f}",
            self.link,
            self.payload_id,
            self.chunk_index,
            self.size_bytes,
            self.phase_class.value,
            self.event,
        ]


LINK_LOG_HEADER = ("time_s", "link", "payload_id", "chunk_index", "bytes", "class", "event")


def write_link_log(events: list[LinkEvent], path: str | Path) -> None:
    ordered = sorted(enumerate(events), key=lambda t: (t[1].time_ns, t[0]))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LINK_LOG_HEADER)
        for _, ev in ordered:
            writer.writerow(ev.as_row())


def transmission_ns(profile: LinkProfile, size_bytes: int) -> int:
    return round(size_bytes * NS_PER_S / profile.bandwidth_bps)


def replay_link(
    profile: LinkProfile,
    arrivals: list[tuple[int, Payload]],
    chunk_size: int | float | None = DEFAULT_CHUNK_SIZE,
    policy: LinkPolicy = LinkPolicy.DECODE_PRIORITY,
    link_name: str | None = None,
) -> list[LinkEvent]:
    """Virtual-time schedule of one link fed by timed payload arrivals.

    Chunks occupy the link serially for size/bandwidth; each chunk lands
    latency_s after its transmission ends, so propagation overlaps the next
    transmission.  Returns the full event log (enqueue/emit/sent/deliver).
    """
    name = link_name or profile.name
    queue = LinkQueue(chunk_size=chunk_size, policy=policy)
    latency_ns = s_to_ns(profile.latency_s)
    events: list[LinkEvent] = []
    # heap entries: (time_ns, order, seq, action, payload_or_chunk)
    # order 0 = arrival, 1 = transmission end; ends free the link first only
    # after same-time arrivals are queued, keeping preemption visible.
    heap: list = []
    seq = 0
    for t, payload in sorted(arrivals, key=lambda a: (a[0], a[1].id)):
        heap.append((t, 0, seq, "arrive", payload))
        seq += 1
    heapq.heapify(heap)
    busy = False

    def start_next(now: int) -> None:
        nonlocal busy, seq
        chunk = queue.next_chunk()
        if chunk is None:
            busy = False
            return
        busy = True
        events.append(
            LinkEvent(now, name, chunk.payload_id, chunk.index, chunk.size_bytes,
                      chunk.phase_class, "emit")
        )
        end = now + transmission_ns(profile, chunk.size_bytes)
        heapq.heappush(heap, (end, 1, seq, "sent", chunk))
        seq += 1

    while heap:
        now, _, _, action, obj = heapq.heappop(heap)
        if action == "arrive":
            queue.enqueue(obj)
            events.append(
                LinkEvent(now, name, obj.id, -1, obj.size_bytes, obj.phase_class,
                          "enqueue")
            )
            if not busy:
                start_next(now)
        else:  # sent
            chunk = obj
            events.append(
                LinkEvent(now, name, chunk.payload_id, chunk.index, chunk.size_bytes,
                          chunk.phase_class, "sent")
            )
            events.append(
                LinkEvent(now + latency_ns, name, chunk.payload_id, chunk.index,
                          chunk.size_bytes, chunk.phase_class, "deliver")
            )
            start_next(now)

    return [e for _, e in sorted(enumerate(events), key=lambda t: (t[1].time_ns, t[0]))]


def first_emit_delay_ns(events: list[LinkEvent], payload_id: int) -> int:
    """Transmission-start delay of a payload: first emit minus its enqueue."""
    enq = next(e.time_ns for e in events if e.payload_id == payload_id and e.event == "enqueue")
    emit = next(e.time_ns for e in events if e.payload_id == payload_id and e.event == "emit")
    return emit - enq
