"""Handle-based KV pool, handle selection for reclamation, MIAD reservation.

Offline KV pages live in equal-size handles.  Reclaiming a handle for online
use remaps every virtual page slot in it to one shared quarantine page and
reports the invalidated page ids per offline request, which then fall back
to the waiting queue and are recomputed later.
"""

from __future__ import annotations

import enum
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Collection, Hashable, Iterable, Mapping, Optional, Union

from .core import EventKind, OnlineRequest, OfflineRequest, SimEvent

if TYPE_CHECKING:
    from .sim import NodeSim

QUARANTINE_PAGE = -1
PRESSURE_UTILIZATION = 0.9
ORACLE_MAX_HANDLES = 20


class HandleState(str, enum.Enum):
    FREE = "free"
    ONLINE_RESERVED = "online_reserved"
    OFFLINE_MAPPED = "offline_mapped"


@dataclass
class MemoryHandle:
    id: int
    state: HandleState = HandleState.FREE
    slots: list = field(default_factory=list)
    mapped_at: int = 0

    def resident_requests(self) -> set[int]:
        if self.state is not HandleState.OFFLINE_MAPPED:
            return set()
        return {o for o in self.slots if o is not None and o != QUARANTINE_PAGE}


# request id -> invalidated page ids
InvalidationReport = dict


class MemoryPool:
    def __init__(self, total_handles: int, handle_pages: int = 64, page_tokens: int = 16):
        if total_handles < 0 or handle_pages < 1 or page_tokens < 1:
            raise ValueError("invalid pool geometry")
        self.handle_pages = handle_pages
        self.page_tokens = page_tokens
        self.total_handles = total_handles
        self.quarantine_page = QUARANTINE_PAGE
        self.handles = [MemoryHandle(i, slots=[None] * handle_pages) for i in range(total_handles)]
        self.free_pages: deque[int] = deque()
        self.online_in_use = 0

    def pages_for(self, tokens: int) -> int:
        return -(-tokens // self.page_tokens)

    def handles_for_pages(self, pages: int) -> int:
        return -(-pages // self.handle_pages)

    def ids(self, state: HandleState) -> list[int]:
        return [h.id for h in self.handles if h.state is state]

    def count(self, state: HandleState) -> int:
        return sum(1 for h in self.handles if h.state is state)

    def counts(self) -> dict[str, int]:
        out = {s.value: 0 for s in HandleState}
        for h in self.handles:
            out[h.state.value] += 1
        return out

    def check_conservation(self) -> None:
        c = self.counts()
        assert sum(c.values()) == self.total_handles
        assert 0 <= self.online_in_use <= c[HandleState.ONLINE_RESERVED.value]

    # online side
    def reserve_free(self, n: int) -> int:
        """Move up to ``n`` free handles to the online reservation."""
        taken = 0
        for h in self.handles:
            if taken == n:
                break
            if h.state is HandleState.FREE:
                h.state = HandleState.ONLINE_RESERVED
                taken += 1
        return taken

    def release_reserved(self, n: int) -> int:
        """Return up to ``n`` unused reserved handles to the free state (highest ids first)."""
        spare = self.count(HandleState.ONLINE_RESERVED) - self.online_in_use
        n = min(n, spare)
        done = 0
        for h in reversed(self.handles):
            if done == n:
                break
            if h.state is HandleState.ONLINE_RESERVED:
                h.state = HandleState.FREE
                h.slots = [None] * self.handle_pages
                done += 1
        return done

    # offline side
    def map_offline(self, t: int) -> Optional[int]:
        for h in self.handles:
            if h.state is HandleState.FREE:
                h.state = HandleState.OFFLINE_MAPPED
                h.mapped_at = t
                h.slots = [None] * self.handle_pages
                base = h.id * self.handle_pages
                self.free_pages.extend(range(base, base + self.handle_pages))
                return h.id
        return None

    def unmap_offline(self, hid: int) -> None:
        """Return an offline handle with no resident pages to the free state."""
        h = self.handles[hid]
        assert h.state is HandleState.OFFLINE_MAPPED and not h.resident_requests()
        h.state = HandleState.FREE
        self._drop_free_pages({hid})

    def alloc_pages(self, owner: int, n: int) -> Optional[list[int]]:
        if n > len(self.free_pages):
            return None
        pages = [self.free_pages.popleft() for _ in range(n)]
        hp = self.handle_pages
        for p in pages:
            self.handles[p // hp].slots[p % hp] = owner
        return pages

    def free_pages_of(self, owner: int, pages: Iterable[int]) -> None:
        hp = self.handle_pages
        for p in pages:
            h = self.handles[p // hp]
            if h.state is HandleState.OFFLINE_MAPPED and h.slots[p % hp] == owner:
                h.slots[p % hp] = None
                self.free_pages.append(p)

    def _drop_free_pages(self, hids: set[int]) -> None:
        hp = self.handle_pages
        self.free_pages = deque(p for p in self.free_pages if p // hp not in hids)

    def remap_to_quarantine(self, hids: Iterable[int]) -> InvalidationReport:
        """Point every slot of the given offline handles at the quarantine page.

        The handles become online-reserved.  Returns request id -> page ids
        that were live in those handles.
        """
        hids = list(hids)
        report: InvalidationReport = {}
        hp = self.handle_pages
        for hid in hids:
            h = self.handles[hid]
            assert h.state is HandleState.OFFLINE_MAPPED
            for slot, owner in enumerate(h.slots):
                if owner is not None and owner != QUARANTINE_PAGE:
                    report.setdefault(owner, []).append(hid * hp + slot)
            h.slots = [QUARANTINE_PAGE] * hp
            h.state = HandleState.ONLINE_RESERVED
        self._drop_free_pages(set(hids))
        return report

    def offline_used_pages(self) -> int:
        return sum(1 for h in self.handles if h.state is HandleState.OFFLINE_MAPPED
                   for o in h.slots if o is not None)

    def residency(self) -> dict[int, set[int]]:
        return {h.id: h.resident_requests() for h in self.handles
                if h.state is HandleState.OFFLINE_MAPPED}


# --- handle selection -------------------------------------------------------

H = Hashable
CostFn = Union[Mapping[H, int], Callable[[H], int]]


def _cost_fn(cost: CostFn) -> Callable[[H], int]:
    return cost if callable(cost) else cost.__getitem__


def marginal_costs(reqs: Mapping[H, Collection[H]], cost: CostFn,
                   selected: Collection[H] = ()) -> dict[H, int]:
    """Extra recompute tokens each unselected handle would add to ``selected``."""
    c = _cost_fn(cost)
    evicted = set().union(*(reqs[h] for h in selected)) if selected else set()
    return {h: sum(c(r) for r in rs if r not in evicted)
            for h, rs in reqs.items() if h not in selected}


def selective_reclaim(reqs: Mapping[H, Collection[H]], k: int, cost: CostFn) -> list[H]:
    """Greedy lowest-marginal-cost handle selection.

    ``reqs`` maps each candidate handle to the requests with pages on it.
    Ties go to the smallest handle id.
    """
    if k < 0 or k > len(reqs):
        raise ValueError(f"cannot pick {k} of {len(reqs)} handles")
    c = _cost_fn(cost)
    order = sorted(reqs)
    picked: list[H] = []
    chosen: set[H] = set()
    evicted: set[H] = set()
    for _ in range(k):
        best, best_cost = None, None
        for h in order:
            if h in chosen:
                continue
            m = sum(c(r) for r in reqs[h] if r not in evicted)
            if best_cost is None or m < best_cost:
                best, best_cost = h, m
        picked.append(best)
        chosen.add(best)
        evicted.update(reqs[best])
    return picked


def fifo_reclaim(mapped_at: Mapping[H, int], k: int) -> list[H]:
    """The ``k`` earliest-mapped handles (ties by id)."""
    if k < 0 or k > len(mapped_at):
        raise ValueError(f"cannot pick {k} of {len(mapped_at)} handles")
    return sorted(mapped_at, key=lambda h: (mapped_at[h], h))[:k]


def eviction_cost(reqs: Mapping[H, Collection[H]], picked: Iterable[H], cost: CostFn) -> int:
    c = _cost_fn(cost)
    hit = set().union(*(reqs[h] for h in picked)) if reqs else set()
    return sum(c(r) for r in hit)


def oracle_reclaim(reqs: Mapping[H, Collection[H]], k: int, cost: CostFn) -> tuple[list[H], int]:
    """Exhaustive minimum-cost ``k``-subset; ties resolved lexicographically."""
    if len(reqs) > ORACLE_MAX_HANDLES:
        raise ValueError(f"oracle limited to {ORACLE_MAX_HANDLES} handles, got {len(reqs)}")
    if k < 0 or k > len(reqs):
        raise ValueError(f"cannot pick {k} of {len(reqs)} handles")
    best, best_cost = None, None
    for combo in itertools.combinations(sorted(reqs), k):
        cst = eviction_cost(reqs, combo, cost)
        if best_cost is None or cst < best_cost:
            best, best_cost = list(combo), cst
    return best, best_cost


# --- MIAD reservation -------------------------------------------------------

@dataclass
class ReservationController:
    """Online headroom ``H`` (handles) and release interval ``T`` (µs).

    ``H`` grows by ``alpha`` on each pressure event and shrinks by one handle
    per quiet interval ``T``.  Once per ``window`` the pressure count is
    compared with ``target_rate``: above it ``T`` is multiplied by ``beta``,
    otherwise it drops by ``delta``.
    """

    H: int = 8
    alpha: float = 1.5
    T: int = 1_000_000
    window: int = 60_000_000
    target_rate: float = 1.0
    beta: float = 2.0
    delta: int = 100_000
    H_min: int = 1
    H_max: int = 1 << 30
    T_min: int = 100_000
    T_max: int = 60_000_000
    pressure_log: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.alpha <= 1 or self.beta <= 1:
            raise ValueError("alpha and beta must exceed 1")
        self.H = max(self.H, self.H_min)

    def on_pressure(self, t: int) -> int:
        self.pressure_log.append(t)
        self.H = min(math.ceil(self.alpha * self.H), self.H_max)
        return self.H

    def on_quiet_interval(self, t: int, floor: int = 0) -> int:
        self.H = max(self.H - 1, self.H_min, floor)
        return self.H

    def window_count(self, t: int) -> int:
        lo = t - self.window
        return sum(1 for p in self.pressure_log if lo < p <= t)

    def on_window(self, t: int) -> int:
        if self.window_count(t) > self.target_rate:
            self.T = min(int(round(self.beta * self.T)), self.T_max)
        else:
            self.T = max(self.T - self.delta, self.T_min)
        return self.T


def reservation_tick(ctrl: ReservationController, t: int, pressure: bool = False) -> int:
    """Apply one MIAD headroom step; returns the new ``H``."""
    return ctrl.on_pressure(t) if pressure else ctrl.on_quiet_interval(t)


# --- policies ---------------------------------------------------------------

class MemoryPolicy:
    """Shared-pool memory policy plugged into :class:`~colocsim.sim.NodeSim`.

    Online requests ask for whole handles through :meth:`online_admit`; the
    node is told via ``node.online_memory_ready`` when they are granted.
    Offline requests take pages through :meth:`offline_alloc`.
    """

    name = "base"
    checks_faults = True

    def __init__(self, node: "NodeSim"):
        self.node = node
        self.sim = node.sim
        self.params = node.params
        self.pool = MemoryPool(self.params.total_handles, self.params.handle_pages,
                               self.params.page_tokens)
        self.waiters: deque[tuple[OnlineRequest, int]] = deque()
        self.reclaim_latencies: list[int] = []

    @property
    def offline_pool(self) -> MemoryPool:
        return self.pool

    def start(self, t: int) -> None:
        pass

    def online_reserved(self) -> int:
        return self.pool.count(HandleState.ONLINE_RESERVED)

    def offline_may_map(self) -> bool:
        return True

    def online_admit(self, req: OnlineRequest, n: int, t: int) -> None:
        self.waiters.append((req, n))
        self._serve(t)

    def online_release(self, req: OnlineRequest, n: int, t: int) -> None:
        self.pool.online_in_use -= n
        self.on_online_released(n, t)
        self._serve(t)

    def on_online_released(self, n: int, t: int) -> None:
        pass

    def _serve(self, t: int) -> None:
        raise NotImplementedError

    def _grant(self, req: OnlineRequest, n: int, t: int, delay: int = 0) -> None:
        self.pool.online_in_use += n
        self.node.online_memory_ready(req, t + delay)

    def _check_pressure(self, t: int) -> bool:
        held = self.online_reserved()
        if held and self.pool.online_in_use >= PRESSURE_UTILIZATION * held:
            self.sim.record("pressure", in_use=self.pool.online_in_use, held=held)
            return True
        return False

    def offline_alloc(self, req: OfflineRequest, pages: int, t: int) -> Optional[list[int]]:
        pool = self.offline_pool
        if pages > len(pool.free_pages):
            mappable = pool.count(HandleState.FREE) if self.offline_may_map() else 0
            mappable = min(mappable, self.offline_map_budget())
            if pages > len(pool.free_pages) + mappable * pool.handle_pages:
                return None
            while pages > len(pool.free_pages):
                pool.map_offline(t)
        return pool.alloc_pages(req.id, pages)

    def offline_map_budget(self) -> int:
        return 1 << 30

    def offline_free(self, req: OfflineRequest) -> None:
        self.offline_pool.free_pages_of(req.id, req.pages)

    def reclaim_handles(self, k: int, t: int, selector: str) -> tuple[list[int], InvalidationReport]:
        """Pick ``k`` offline handles, remap them to quarantine, evict residents."""
        pool = self.pool
        residency = pool.residency()
        k_eff = min(k, len(residency))
        if selector == "fifo":
            picked = fifo_reclaim({h: pool.handles[h].mapped_at for h in residency}, k_eff)
        else:
            offline = self.node.offline_reqs
            picked = selective_reclaim(residency, k_eff, lambda r: offline[r].cost)
        touched = set().union(*(residency[h] for h in picked)) if picked else set()
        if self.checks_faults:
            self.node.check_page_access(touched)
        report = pool.remap_to_quarantine(picked)
        self.node.invalidate_offline(report)
        return picked, report


class OurMemPolicy(MemoryPolicy):
    """Sub-layer reclamation behind a MIAD-controlled online headroom."""

    name = "our_mem"

    def __init__(self, node: "NodeSim"):
        super().__init__(node)
        p = self.params
        self.ctrl = ReservationController(
            H=p.H_init, alpha=p.alpha, T=p.T_init_us, window=p.window_us,
            target_rate=p.target_rate, beta=p.beta, delta=p.delta_us, H_min=p.H_min,
            H_max=p.total_handles, T_min=p.T_min_us, T_max=p.T_max_us)
        self.pending = 0
        self.pending_blocking = 0
        self._tick_ev: Optional[SimEvent] = None
        self.sim.on(EventKind.RECLAMATION_COMPLETE, self._on_reclaim_done)
        self.sim.on(EventKind.RESERVATION_TICK, self._on_tick)

    def start(self, t: int) -> None:
        self.pool.reserve_free(min(self.ctrl.H, self.pool.total_handles))
        self._arm_release(t)
        self.sim.at(t + self.ctrl.window, EventKind.RESERVATION_TICK, "window")

    def _arm_release(self, t: int) -> None:
        self.sim.cancel(self._tick_ev)
        self._tick_ev = self.sim.at(t + self.ctrl.T, EventKind.RESERVATION_TICK, "release")

    def _serve(self, t: int) -> None:
        pool = self.pool
        while self.waiters:
            req, n = self.waiters[0]
            spare = self.online_reserved() - pool.online_in_use
            if spare < n:
                short = n - spare - pool.reserve_free(n - spare)
                if short > 0:
                    extra = short - self.pending_blocking
                    if extra > 0 and self._reclaimable() > 0:
                        self._start_reclaim(min(extra, self._reclaimable()), t, blocking=True)
                    return
            self.waiters.popleft()
            self.ctrl.H = max(self.ctrl.H, pool.online_in_use + n)
            self._grant(req, n, t)
            if self._check_pressure(t):
                self._on_pressure(t)

    def _reclaimable(self) -> int:
        return self.pool.count(HandleState.OFFLINE_MAPPED) - self.pending

    def _on_pressure(self, t: int) -> None:
        target = self.ctrl.on_pressure(t)
        self.sim.record("headroom", H=target, T=self.ctrl.T)
        want = target - self.online_reserved() - self.pending
        if want > 0:
            want -= self.pool.reserve_free(want)
            want = min(want, self._reclaimable())
            if want > 0:
                self._start_reclaim(want, t, blocking=False)
        self._arm_release(t)

    def _start_reclaim(self, k: int, t: int, blocking: bool) -> None:
        self.pending += k
        if blocking:
            self.pending_blocking += k
        op = {"k": k, "t0": t, "blocking": blocking, "done": None}
        self.sim.record("reclaim_start", k=k, blocking=blocking)
        remap = k * self.params.remap_us_per_handle
        if self.params.reclaim_order == "memory_first":
            # unsafe ordering, only for exercising the fault detector
            op["done"] = self.reclaim_handles(k, t, self.params.eviction)
            self.node.compute.request_disable(t)
            ready = t
        else:
            ready = self.node.compute.request_disable(t)
        self.sim.at(ready + remap, EventKind.RECLAMATION_COMPLETE, op)

    def _on_reclaim_done(self, ev: SimEvent) -> None:
        t, op = ev.time, ev.payload
        picked, report = op["done"] or self.reclaim_handles(op["k"], t, self.params.eviction)
        self.pending -= op["k"]
        if op["blocking"]:
            self.pending_blocking -= op["k"]
        self.reclaim_latencies.append(t - op["t0"])
        self.sim.record("reclaim_done", k=op["k"], got=len(picked), latency=t - op["t0"],
                        handles=list(picked), requests=len(report),
                        tokens=sum(self.node.evicted_cost.get(r, 0) for r in report))
        # grant first so a waiter's launch keeps the gate closed through release
        self._serve(t)
        self.node.compute.release(t)

    def _on_tick(self, ev: SimEvent) -> None:
        t = ev.time
        if ev.payload == "window":
            T = self.ctrl.on_window(t)
            self.sim.record("window", T=T, count=self.ctrl.window_count(t))
            self.sim.at(t + self.ctrl.window, EventKind.RESERVATION_TICK, "window")
            return
        self._tick_ev = None
        H = self.ctrl.on_quiet_interval(t, floor=self.pool.online_in_use)
        surplus = self.online_reserved() + self.pending - H
        if surplus > 0 and self.pool.release_reserved(min(surplus, 1)):
            self.sim.record("headroom", H=H, T=self.ctrl.T)
            self.node.kick_offline(t)
        self._arm_release(t)
