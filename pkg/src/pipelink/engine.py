"""Discrete-event pipeline execution core.

Single-threaded event loop over an integer-nanosecond virtual clock: requests
arrive, the head batches them into micro-batches under the controller's
per-iteration decision, stages compute via latency profiles, activations and
token feedback move over serial chunked links, and tokens are emitted when
feedback reaches the head.

Event ties at one timestamp resolve in a frozen order (payload deliveries,
then compute completions, then arrivals, then iteration boundaries, then
chunk completions), then by subject id, so runs are bit-reproducible.
"""

from __future__ import annotations

import csv
import enum
import heapq
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .controller import ControllerConfig, ControllerDecision, choose_n
from .errors import ConfigError
from .placement import TOKEN_FEEDBACK_BYTES, ClusterSpec, ModelSpec, PartitionPlan
from .profiles import LinkProfile, Phase, StageProfile, compute_time
from .transport import (
    DEFAULT_CHUNK_SIZE,
    Chunk,
    LinkEvent,
    LinkPolicy,
    LinkQueue,
    NS_PER_S,
    Payload,
    PayloadClass,
    s_to_ns,
    transmission_ns,
)
from .workload import Request, RequestState, Trace


class EventKind(enum.IntEnum):
    """Heap tie order at equal timestamps; values are frozen."""

    PAYLOAD_DELIVERED = 0
    COMPUTE_DONE = 1
    ARRIVAL = 2
    ITERATION_BOUNDARY = 3
    CHUNK_SENT = 4


class BatchPhase(enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    MIXED = "mixed"


class SchedulingPolicy(enum.Enum):
    DECODE_PRIORITY = "decode_priority"
    FCFS = "fcfs"


@dataclass(frozen=True)
class MicroBatch:
    id: int
    request_ids: tuple[int, ...]
    phase: BatchPhase
    batched_tokens: int
    created_at: float  # seconds

    def __post_init__(self) -> None:
        if not self.request_ids:
            raise ConfigError(f"micro-batch {self.id} has no requests")


@dataclass(frozen=True)
class EngineConfig:
    partition: PartitionPlan
    model: ModelSpec
    controller: ControllerConfig
    chunk_size: int | None = DEFAULT_CHUNK_SIZE
    scheduling_policy: SchedulingPolicy = SchedulingPolicy.DECODE_PRIORITY
    seed: int = 0
    allow_mixed_phase: bool = False


@dataclass(frozen=True)
class EngineEvent:
    time_ns: int
    kind: EventKind
    subject: int
    stage: int  # -1 when not stage-scoped


EVENT_LOG_HEADER = ("time_s", "kind", "subject", "stage")


def write_event_log(events: list[EngineEvent], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_LOG_HEADER)
        for ev in events:
            writer.writerow(
                [f"{ev.time_ns / NS_PER_S:.6f}", ev.kind.name, ev.subject, ev.stage]
            )


@dataclass
class RunResult:
    """Everything a run produced, at nanosecond precision for exact checks."""

    requests: list[Request]
    events: list[EngineEvent]
    link_events: list[LinkEvent]
    decisions: list[tuple[int, ControllerDecision]]
    stage_busy_ns: list[list[tuple[int, int]]]
    token_emissions: list[tuple[int, int]]  # (time_ns, request_id)
    first_compute_ns: dict[int, int]
    end_ns: int
    all_finished: bool

    def tokens_by_request(self) -> dict[int, int]:
        return {r.id: r.tokens_emitted for r in self.requests}

    def tokens_in_window(self, t0_s: float, t1_s: float) -> int:
        t0, t1 = s_to_ns(t0_s), s_to_ns(t1_s)
        return sum(1 for t, _ in self.token_emissions if t0 <= t < t1)


def measure_bubble(result: RunResult, stage_id: int, t0_s: float, t1_s: float) -> float:
    """Idle fraction of a stage within [t0, t1): 1 means fully idle."""
    t0, t1 = s_to_ns(t0_s), s_to_ns(t1_s)
    if t1 <= t0:
        raise ConfigError("empty measurement window")
    if t0 < 0 or t1 > result.end_ns:
        raise ConfigError(
            f"window [{t0_s}, {t1_s}] outside run span [0, {result.end_ns / NS_PER_S}]"
        )
    if not 0 <= stage_id < len(result.stage_busy_ns):
        raise ConfigError(f"unknown stage {stage_id}")
    busy = 0
    for s, e in result.stage_busy_ns[stage_id]:
        busy += max(0, min(e, t1) - max(s, t0))
    return 1.0 - busy / (t1 - t0)


@dataclass
class _Bin:
    index: int
    tokens: int = 0
    members: list[Request] = field(default_factory=list)
    phase: BatchPhase | None = None


def admit_and_batch(
    decoding: deque[Request],
    queued: deque[Request],
    decision: ControllerDecision,
    max_batch_size: int,
    capacity: int,
    now_s: float,
    allow_mixed: bool = False,
    id_start: int = 0,
) -> list[MicroBatch]:
    """Continuous batching step: fill up to ``capacity`` micro-batches.

    Ready decoding requests go first (one token each), then queued prefills
    strictly FCFS, each into the lightest-loaded compatible micro-batch under
    the token budget and batch-size caps.  Phases stay separate unless
    ``allow_mixed``.  A prefill whose input alone exceeds the budget is
    admitted solo into an empty micro-batch rather than blocking forever.
    Admitted requests are consumed from the input queues.
    """
    budget = decision.token_budget_per_microbatch
    if capacity < 1:
        return []
    bins: list[_Bin] = []

    def compatible(b: _Bin, phase: BatchPhase) -> bool:
        return b.phase is None or b.phase is phase or allow_mixed

    def lightest(phase: BatchPhase, extra_tokens: int) -> _Bin | None:
        fits = [
            b
            for b in bins
            if compatible(b, phase)
            and b.tokens + extra_tokens <= budget
            and len(b.members) < max_batch_size
        ]
        return min(fits, key=lambda b: (b.tokens, b.index)) if fits else None

    def place(b: _Bin, request: Request, tokens: int, phase: BatchPhase) -> None:
        b.members.append(request)
        b.tokens += tokens
        if b.phase is None:
            b.phase = phase
        elif b.phase is not phase:
            b.phase = BatchPhase.MIXED

    def open_bin() -> _Bin | None:
        if len(bins) >= capacity:
            return None
        b = _Bin(index=len(bins))
        bins.append(b)
        return b

    while decoding:
        b = lightest(BatchPhase.DECODE, 1) or open_bin()
        if b is None:
            break
        place(b, decoding.popleft(), 1, BatchPhase.DECODE)

    while queued:
        request = queued[0]
        b = lightest(BatchPhase.PREFILL, request.input_len)
        if b is None:
            # A fresh micro-batch takes any prefill, including one whose
            # input alone exceeds the budget (oversize-admit: solo rather
            # than stuck forever, since compute is never split).
            b = open_bin()
        if b is None:
            break  # strict FCFS: nothing behind this request is considered
        place(b, queued.popleft(), request.input_len, BatchPhase.PREFILL)

    batches = []
    for b in bins:
        if not b.members:
            continue
        batches.append(
            MicroBatch(
                id=id_start + len(batches),
                request_ids=tuple(r.id for r in b.members),
                phase=b.phase or BatchPhase.DECODE,
                batched_tokens=b.tokens,
                created_at=now_s,
            )
        )
    return batches


class _StageRuntime:
    def __init__(self, idx: int, profile: StageProfile):
        self.idx = idx
        self.profile = profile
        self.busy = False
        self.queue: deque[MicroBatch] = deque()
        self.busy_intervals: list[tuple[int, int]] = []
        self.current_start = 0
        self.current: MicroBatch | None = None


class _LinkRuntime:
    def __init__(self, idx: int, profile: LinkProfile, chunk_size, policy: LinkPolicy,
                 dst_stage: int, is_return: bool):
        self.idx = idx
        self.profile = profile
        self.queue = LinkQueue(chunk_size=chunk_size, policy=policy)
        self.busy = False
        self.dst_stage = dst_stage
        self.is_return = is_return
        self.payload_mb: dict[int, MicroBatch] = {}


class PipelineEngine:
    """Virtual-time pipeline over a partition plan, cluster links and profiles."""

    def __init__(
        self,
        cfg: EngineConfig,
        cluster: ClusterSpec,
        stage_profiles: list[StageProfile],
    ):
        num_stages = len(cfg.partition.stages)
        if len(stage_profiles) != num_stages:
            raise ConfigError(
                f"{num_stages} stages in plan but {len(stage_profiles)} profiles"
            )
        names = cfg.partition.node_names()
        for name in names:
            if name not in cluster.nodes:
                raise ConfigError(f"plan references unregistered node {name}")
        link_profiles: list[LinkProfile] = []
        if num_stages >= 2:
            hops = list(zip(names, names[1:])) + [(names[-1], names[0])]
            for src, dst in hops:
                link = cluster.link(src, dst)
                if link is None:
                    raise ConfigError(f"cluster is missing required link {src}->{dst}")
                link_profiles.append(link)
        self.cfg = cfg
        self.cluster = cluster
        self.stage_profiles = list(stage_profiles)
        self.link_profiles = link_profiles
        self.bytes_per_token = cfg.model.hidden_dim * cfg.model.dtype_bytes

    # -- run state ---------------------------------------------------------

    def _reset(self) -> None:
        policy = (
            LinkPolicy.DECODE_PRIORITY
            if self.cfg.scheduling_policy is SchedulingPolicy.DECODE_PRIORITY
            else LinkPolicy.FCFS
        )
        S = len(self.stage_profiles)
        self._stages = [_StageRuntime(i, p) for i, p in enumerate(self.stage_profiles)]
        self._links: list[_LinkRuntime] = []
        for i, lp in enumerate(self.link_profiles):
            is_return = i == len(self.link_profiles) - 1
            dst = 0 if is_return else i + 1
            self._links.append(
                _LinkRuntime(i, lp, self.cfg.chunk_size, policy, dst, is_return)
            )
        self._heap: list[tuple[int, int, int, int, object]] = []
        self._seq = 0
        self._requests: dict[int, Request] = {}
        self._pending: deque[Request] = deque()
        self._ready_decode: deque[Request] = deque()
        self._in_flight: dict[int, MicroBatch] = {}
        self._boundary_times: set[int] = set()
        self._events: list[EngineEvent] = []
        self._link_events: list[LinkEvent] = []
        self._decisions: list[tuple[int, ControllerDecision]] = []
        self._token_emissions: list[tuple[int, int]] = []
        self._first_compute_ns: dict[int, int] = {}
        self._iteration = 0
        self._next_mb_id = 0
        self._next_payload_id = 0
        self._last_decision: ControllerDecision | None = None
        self._now = 0

    def _push(self, time_ns: int, kind: EventKind, subject: int, data: object = None) -> None:
        heapq.heappush(self._heap, (time_ns, int(kind), subject, self._seq, data))
        self._seq += 1

    def _log(self, time_ns: int, kind: EventKind, subject: int, stage: int = -1) -> None:
        self._events.append(EngineEvent(time_ns, kind, subject, stage))

    def _log_link(self, link: _LinkRuntime, time_ns: int, payload_id: int,
                  chunk_index: int, size: int, pclass: PayloadClass, event: str) -> None:
        self._link_events.append(
            LinkEvent(time_ns, link.profile.name, payload_id, chunk_index, size,
                      pclass, event)
        )

    # -- link mechanics ----------------------------------------------------

    def _link_emit_next(self, link: _LinkRuntime, now: int) -> None:
        chunk = link.queue.next_chunk()
        if chunk is None:
            link.busy = False
            return
        link.busy = True
        self._log_link(link, now, chunk.payload_id, chunk.index, chunk.size_bytes,
                       chunk.phase_class, "emit")
        end = now + transmission_ns(link.profile, chunk.size_bytes)
        self._push(end, EventKind.CHUNK_SENT, chunk.payload_id, (link.idx, chunk))

    def _send_payload(self, link: _LinkRuntime, mb: MicroBatch, size: int,
                      pclass: PayloadClass, now: int) -> None:
        payload = Payload(
            id=self._next_payload_id,
            phase_class=pclass,
            size_bytes=size,
            micro_batch_id=mb.id,
            enqueue_time=now,
        )
        self._next_payload_id += 1
        link.payload_mb[payload.id] = mb
        link.queue.enqueue(payload)
        self._log_link(link, now, payload.id, -1, size, pclass, "enqueue")
        if not link.busy:
            self._link_emit_next(link, now)

    # -- stage mechanics ---------------------------------------------------

    def _try_start_compute(self, stage: _StageRuntime, now: int) -> None:
        if stage.busy or not stage.queue:
            return
        mb = stage.queue.popleft()
        stage.busy = True
        stage.current = mb
        stage.current_start = now
        phase = Phase.DECODE if mb.phase is BatchPhase.DECODE else Phase.PREFILL
        c_ns = max(1, s_to_ns(compute_time(stage.profile, phase, mb.batched_tokens)))
        if stage.idx == 0:
            for rid in mb.request_ids:
                self._first_compute_ns.setdefault(rid, now)
        self._push(now + c_ns, EventKind.COMPUTE_DONE, mb.id, stage.idx)

    def _on_compute_done(self, stage_idx: int, mb_id: int, now: int) -> None:
        stage = self._stages[stage_idx]
        mb = stage.current
        assert mb is not None and mb.id == mb_id
        stage.busy_intervals.append((stage.current_start, now))
        stage.busy = False
        stage.current = None
        self._log(now, EventKind.COMPUTE_DONE, mb.id, stage_idx)

        last = stage_idx == len(self._stages) - 1
        if not last:
            pclass = (
                PayloadClass.DECODE
                if mb.phase is BatchPhase.DECODE
                else PayloadClass.PREFILL
            )
            size = max(1, mb.batched_tokens * self.bytes_per_token)
            self._send_payload(self._links[stage_idx], mb, size, pclass, now)
        elif self._links:
            size = max(1, TOKEN_FEEDBACK_BYTES * len(mb.request_ids))
            self._send_payload(self._links[-1], mb, size, PayloadClass.DECODE, now)
        else:
            # Single-stage pipeline: tokens surface at compute completion.
            self._apply_feedback(mb, now)
            self._schedule_boundary(now)

        self._try_start_compute(stage, now)
        if stage_idx == 0:
            self._schedule_boundary(now)

    # -- head scheduling ---------------------------------------------------

    def _apply_feedback(self, mb: MicroBatch, now: int) -> None:
        self._in_flight.pop(mb.id, None)
        now_s = now / NS_PER_S
        for rid in mb.request_ids:
            req = self._requests[rid]
            req.tokens_emitted += 1
            self._token_emissions.append((now, rid))
            if req.state is RequestState.PREFILL:
                req.first_token_time = now_s
                if req.output_len == 1:
                    req.state = RequestState.FINISHED
                    req.finish_time = now_s
                else:
                    req.state = RequestState.DECODING
                    self._ready_decode.append(req)
            elif req.state is RequestState.DECODING:
                if req.tokens_emitted >= req.output_len:
                    req.state = RequestState.FINISHED
                    req.finish_time = now_s
                else:
                    self._ready_decode.append(req)

    def _schedule_boundary(self, now: int) -> None:
        if now in self._boundary_times:
            return
        self._boundary_times.add(now)
        self._push(now, EventKind.ITERATION_BOUNDARY, self._iteration + 1, None)

    def _demand_tokens(self) -> int:
        demand = len(self._ready_decode)
        demand += sum(mb.batched_tokens for mb in self._in_flight.values())
        demand += sum(r.input_len for r in self._pending)
        return demand

    def _on_boundary(self, now: int) -> None:
        self._boundary_times.discard(now)
        head = self._stages[0]
        if head.busy or head.queue:
            return
        if not self._ready_decode and not self._pending:
            return
        phase = Phase.DECODE if self._ready_decode else Phase.PREFILL
        if (
            self._last_decision is None
            or self._iteration % self.cfg.controller.decision_stride == 0
        ):
            decision = choose_n(
                self.cfg.controller,
                self.stage_profiles,
                self.link_profiles,
                self._demand_tokens(),
                phase,
                bytes_per_token=self.bytes_per_token,
            )
        else:
            decision = self._last_decision
        capacity = decision.n_microbatches - len(self._in_flight)
        if capacity <= 0:
            return
        batches = admit_and_batch(
            self._ready_decode,
            self._pending,
            decision,
            self.cfg.controller.max_batch_size,
            capacity,
            now / NS_PER_S,
            allow_mixed=self.cfg.allow_mixed_phase,
            id_start=self._next_mb_id,
        )
        if not batches:
            return
        self._iteration += 1
        self._last_decision = decision
        self._decisions.append((self._iteration, decision))
        self._log(now, EventKind.ITERATION_BOUNDARY, self._iteration, 0)
        self._next_mb_id += len(batches)
        for mb in batches:
            self._in_flight[mb.id] = mb
            for rid in mb.request_ids:
                req = self._requests[rid]
                if req.state is RequestState.QUEUED:
                    req.state = RequestState.PREFILL
            head.queue.append(mb)
        self._try_start_compute(head, now)

    # -- event loop --------------------------------------------------------

    def run(self, trace: Trace, horizon_s: float | None = None) -> RunResult:
        """Process the trace to completion (or up to ``horizon_s``).

        Deterministic for a fixed config: identical inputs produce identical
        event logs, reports, and per-request timelines.
        """
        self._reset()
        seen = set()
        for r in trace.requests:
            if r.id in seen:
                raise ConfigError(f"duplicate request id {r.id} in trace")
            seen.add(r.id)
            req = r.fresh_copy()
            arrival_ns = s_to_ns(r.arrival_time)
            req.arrival_time = arrival_ns / NS_PER_S  # snap to the virtual clock
            self._requests[r.id] = req
            self._push(arrival_ns, EventKind.ARRIVAL, r.id, None)
        horizon_ns = None if horizon_s is None else s_to_ns(horizon_s)

        last_time = 0
        while self._heap:
            if horizon_ns is not None and self._heap[0][0] > horizon_ns:
                last_time = horizon_ns
                break
            time_ns, kind_value, subject, _, data = heapq.heappop(self._heap)
            self._now = time_ns
            last_time = max(last_time, time_ns)
            kind = EventKind(kind_value)
            if kind is EventKind.ARRIVAL:
                req = self._requests[subject]
                self._pending.append(req)
                self._log(time_ns, EventKind.ARRIVAL, subject)
                self._schedule_boundary(time_ns)
            elif kind is EventKind.ITERATION_BOUNDARY:
                self._on_boundary(time_ns)
            elif kind is EventKind.COMPUTE_DONE:
                self._on_compute_done(data, subject, time_ns)  # data = stage idx
            elif kind is EventKind.CHUNK_SENT:
                link_idx, chunk = data
                link = self._links[link_idx]
                self._log_link(link, time_ns, chunk.payload_id, chunk.index,
                               chunk.size_bytes, chunk.phase_class, "sent")
                self._log(time_ns, EventKind.CHUNK_SENT, chunk.payload_id, -1)
                latency_ns = s_to_ns(link.profile.latency_s)
                self._push(
                    time_ns + latency_ns,
                    EventKind.PAYLOAD_DELIVERED,
                    chunk.payload_id,
                    (link_idx, chunk),
                )
                self._link_emit_next(link, time_ns)
            elif kind is EventKind.PAYLOAD_DELIVERED:
                link_idx, chunk = data
                link = self._links[link_idx]
                self._log_link(link, time_ns, chunk.payload_id, chunk.index,
                               chunk.size_bytes, chunk.phase_class, "deliver")
                if not chunk.is_last:
                    continue
                mb = link.payload_mb.pop(chunk.payload_id)
                self._log(time_ns, EventKind.PAYLOAD_DELIVERED, chunk.payload_id,
                          link.dst_stage)
                if link.is_return:
                    self._apply_feedback(mb, time_ns)
                    self._schedule_boundary(time_ns)
                else:
                    dst = self._stages[link.dst_stage]
                    dst.queue.append(mb)
                    self._try_start_compute(dst, time_ns)

        # Close busy intervals cut off by the horizon.
        for stage in self._stages:
            if stage.busy:
                stage.busy_intervals.append((stage.current_start, last_time))
                stage.busy = False

        requests = [self._requests[rid] for rid in sorted(self._requests)]
        ordered_links = [
            e for _, e in sorted(
                enumerate(self._link_events), key=lambda t: (t[1].time_ns, t[0])
            )
        ]
        return RunResult(
            requests=requests,
            events=self._events,
            link_events=ordered_links,
            decisions=self._decisions,
            stage_busy_ns=[s.busy_intervals for s in self._stages],
            token_emissions=self._token_emissions,
            first_compute_ns=self._first_compute_ns,
            end_ns=last_time,
            all_finished=all(r.state is RequestState.FINISHED for r in requests),
        )
