"""Discrete-event engine and the request/GPU records shared by every module.

All times are integer microseconds.  Events are ordered by ``(time, seq)``
where ``seq`` is the insertion counter, so two runs that schedule the same
events in the same order replay identically.
"""

from __future__ import annotations

import enum
import heapq
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Optional


class SimulationError(RuntimeError):
    """Raised on simulator logic bugs such as scheduling into the past."""


class EventKind(str, enum.Enum):
    ARRIVAL = "arrival"
    ITERATION_START = "iteration-start"
    ITERATION_END = "iteration-end"
    CHANNEL_TOGGLE_COMPLETE = "channel-toggle-complete"
    COOLDOWN_EXPIRY = "cooldown-expiry"
    RECLAMATION_COMPLETE = "reclamation-complete"
    RESERVATION_TICK = "reservation-tick"
    MONITOR_TICK = "monitor-tick"


class SimEvent(NamedTuple):
    time: int
    seq: int
    kind: EventKind
    payload: Any = None


class Simulator:
    """Single-threaded event loop with a structured run log.

    Handlers are registered per :class:`EventKind`; a handler receives the
    event after the clock has advanced to ``event.time``.
    """

    def __init__(self) -> None:
        self.now = 0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._cancelled: set[int] = set()
        self._handlers: dict[EventKind, Callable[[SimEvent], None]] = {}
        self.log: list[dict] = []
        self.counts: Counter[str] = Counter()
        self.dispatched = 0

    def on(self, kind: EventKind, handler: Callable[[SimEvent], None]) -> None:
        self._handlers[kind] = handler

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def schedule(self, event: SimEvent) -> SimEvent:
        if event.time < self.now:
            raise SimulationError(
                f"event {event.kind.value} at t={event.time} is before clock t={self.now}")
        heapq.heappush(self._queue, event)
        return event

    def at(self, time: int, kind: EventKind, payload: Any = None) -> SimEvent:
        return self.schedule(SimEvent(int(time), self.next_seq(), kind, payload))

    def cancel(self, event: Optional[SimEvent]) -> None:
        if event is not None:
            self._cancelled.add(event.seq)

    def pending(self) -> int:
        return len(self._queue) - len(self._cancelled)

    def run(self, until: Optional[int] = None) -> int:
        queue = self._queue
        while queue:
            if until is not None and queue[0].time > until:
                break
            ev = heapq.heappop(queue)
            if ev.seq in self._cancelled:
                self._cancelled.discard(ev.seq)
                continue
            if ev.time < self.now:
                raise SimulationError("clock went backwards")
            self.now = ev.time
            self.dispatched += 1
            handler = self._handlers.get(ev.kind)
            if handler is None:
                raise SimulationError(f"no handler for {ev.kind.value}")
            handler(ev)
        if until is not None and until > self.now:
            self.now = until
        return self.now

    def record(self, ev: str, **fields: Any) -> dict:
        entry = {"t": self.now, "ev": ev}
        entry.update(fields)
        self.counts[ev] += 1
        self.log.append(entry)
        return entry


class OnlineState(str, enum.Enum):
    QUEUED = "queued"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    DONE = "done"


class OfflineState(str, enum.Enum):
    WAITING = "waiting"
    RUNNING = "running"
    EVICTED_WAITING = "evicted-waiting"
    DONE = "done"


@dataclass
class OnlineRequest:
    id: int
    arrival: int
    prompt_tokens: int
    output_tokens: int
    state: OnlineState = OnlineState.QUEUED
    first_token_at: Optional[int] = None
    token_emit_times: list[int] = field(default_factory=list)
    done_at: Optional[int] = None
    handles: int = 0
    # migration time owed by the first kernel that touches this request's memory
    stall_us: int = 0

    def emit(self, t: int) -> None:
        if self.token_emit_times and t <= self.token_emit_times[-1]:
            raise SimulationError(f"online request {self.id} emitted twice at t={t}")
        if len(self.token_emit_times) >= self.output_tokens:
            raise SimulationError(f"online request {self.id} over-emitted")
        if self.first_token_at is None:
            self.first_token_at = t
        self.token_emit_times.append(t)

    @property
    def finished(self) -> bool:
        return len(self.token_emit_times) >= self.output_tokens

    @property
    def kv_tokens(self) -> int:
        return self.prompt_tokens + self.output_tokens


@dataclass
class OfflineRequest:
    id: int
    input_tokens: int
    output_tokens: int
    generated_tokens: int = 0
    state: OfflineState = OfflineState.WAITING
    pages: list[int] = field(default_factory=list)
    needs_prefill: bool = True
    arrival: int = 0

    @property
    def cost(self) -> int:
        """Tokens that must be recomputed if this request's KV is dropped."""
        return self.input_tokens + self.generated_tokens

    @property
    def kv_tokens(self) -> int:
        return self.input_tokens + self.output_tokens


class Owner(str, enum.Enum):
    IDLE = "idle"
    ONLINE = "online"
    OFFLINE = "offline"


@dataclass
class GpuSim:
    id: int
    compute_owner: Owner = Owner.IDLE
    busy_intervals: dict[str, list[tuple[int, int]]] = field(
        default_factory=lambda: {"online": [], "offline": []})

    def add_busy(self, cls: str, start: int, end: int) -> None:
        if end <= start:
            return
        ivs = self.busy_intervals[cls]
        if ivs and start < ivs[-1][1]:
            raise SimulationError(f"overlapping {cls} busy interval on gpu {self.id}")
        ivs.append((start, end))

    def busy_time(self, cls: str) -> int:
        return sum(e - s for s, e in self.busy_intervals[cls])


@dataclass(frozen=True)
class CostModel:
    """Linear token cost: prefill ``c_p`` µs per token, one decode step ``c_d`` µs."""

    prefill_us_per_token: int = 10
    decode_us: int = 2000

    def prefill(self, tokens: int) -> int:
        return self.prefill_us_per_token * tokens

    def decode(self) -> int:
        return self.decode_us
