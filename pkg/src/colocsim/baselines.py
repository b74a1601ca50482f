"""Comparison policies: iteration-boundary and timeslice compute preemption,
UVM / Prism / static-limit memory sharing, and the isolated standalone setup."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from .compute import ChannelCompute, CooldownPolicy, PreemptiveCompute
from .core import EventKind, SimEvent
from .memory import HandleState, MemoryPolicy, MemoryPool, OurMemPolicy

if TYPE_CHECKING:
    from .sim import NodeSim

COMPUTE_POLICIES = ("channel", "kernel_preempt", "gpreempt")
MEMORY_POLICIES = ("our_mem", "uvm", "prism", "static_mem")

PRESETS = {
    "valve": ("channel", "our_mem"),
    "kernel+uvm": ("kernel_preempt", "uvm"),
    "gpreempt+uvm": ("gpreempt", "uvm"),
    "channel+uvm": ("channel", "uvm"),
    "channel+prism": ("channel", "prism"),
    "channel+static": ("channel", "static_mem"),
}
STANDALONE = "standalone"
REFERENCE_PRESET = "channel+prism"


@dataclass(frozen=True)
class PolicySelection:
    compute: str
    memory: str

    def __post_init__(self):
        standalone = (self.compute, self.memory) == ("isolated", "isolated")
        if not standalone and (self.compute not in COMPUTE_POLICIES
                               or self.memory not in MEMORY_POLICIES):
            raise ValueError(f"invalid policy pair {self.compute}+{self.memory}")

    @property
    def name(self) -> str:
        if (self.compute, self.memory) == ("isolated", "isolated"):
            return STANDALONE
        for preset, pair in PRESETS.items():
            if pair == (self.compute, self.memory):
                return preset
        return f"{self.compute}+{self.memory}"

    @classmethod
    def parse(cls, name: str) -> "PolicySelection":
        if name == STANDALONE:
            return cls("isolated", "isolated")
        if name in PRESETS:
            return cls(*PRESETS[name])
        compute, sep, memory = name.partition("+")
        if sep and compute in COMPUTE_POLICIES and memory in MEMORY_POLICIES:
            return cls(compute, memory)
        raise ValueError(f"unknown preset {name!r}; valid presets: "
                         + ", ".join(list(PRESETS) + [STANDALONE]))


class KernelPreemptCompute(PreemptiveCompute):
    """Switches only when the in-flight offline iteration (one CUDA graph) ends."""

    name = "kernel_preempt"

    def drain_latency(self, t: int) -> int:
        return self.node.offline_kernel_remaining(t)


class GPreemptCompute(PreemptiveCompute):
    """Timeslice switching: fast preemption but offline wakes in every idle gap."""

    name = "gpreempt"

    def __init__(self, node, timeslice_us: int, cooldown: CooldownPolicy):
        super().__init__(node, timeslice_us, cooldown)
        self.timeslice_us = timeslice_us

    def drain_latency(self, t: int) -> int:
        return min(self.timeslice_us, self.node.offline_kernel_remaining(t))


class IsolatedCompute:
    """Online and offline on separate GPUs; used for standalone references."""

    name = "isolated"
    status = None
    holds = 0

    def __init__(self, node: "NodeSim"):
        self.node = node
        self.disable_times: list[int] = []

    def offline_may_run(self) -> bool:
        return True

    def on_online_busy(self, t: int) -> int:
        return t

    def on_online_idle(self, t: int) -> None:
        pass

    def request_disable(self, t: int) -> int:
        return t

    def release(self, t: int) -> None:
        pass


def make_compute(name: str, node: "NodeSim", cooldown: CooldownPolicy, toggle_us: int):
    p = node.params
    if name == "channel":
        return ChannelCompute(node, toggle_us, cooldown, p.enable_latency_us)
    no_cooldown = CooldownPolicy(G=cooldown.G, T_cool=0)
    if name == "kernel_preempt":
        return KernelPreemptCompute(node, toggle_us, no_cooldown)
    if name == "gpreempt":
        return GPreemptCompute(node, p.gpreempt_timeslice_us, no_cooldown)
    if name == "isolated":
        return IsolatedCompute(node)
    raise ValueError(f"unknown compute policy {name!r}")


class UvmPolicy(MemoryPolicy):
    """Offline fills all memory online is not using; every online shortfall
    migrates offline pages out on the online critical path.

    Migration happens on demand-paging faults, so the cost stalls the online
    kernel that first touches the new memory rather than delaying admission.
    """

    name = "uvm"
    checks_faults = False

    def start(self, t: int) -> None:
        self.pool.reserve_free(self.params.uvm_prealloc_handles)

    def _serve(self, t: int) -> None:
        pool = self.pool
        while self.waiters:
            req, n = self.waiters[0]
            spare = self.online_reserved() - pool.online_in_use
            stall = 0
            if spare < n:
                short = n - spare - pool.reserve_free(n - spare)
                if short > 0:
                    k = min(short, pool.count(HandleState.OFFLINE_MAPPED))
                    if k == 0:
                        return
                    self.sim.record("pressure", in_use=pool.online_in_use,
                                    held=self.online_reserved())
                    self.sim.record("reclaim_start", k=k, blocking=True)
                    picked, report = self.reclaim_handles(k, t, "fifo")
                    stall = k * pool.handle_pages * self.params.uvm_penalty_us_per_page
                    self.reclaim_latencies.append(stall)
                    self.sim.record("reclaim_done", k=k, got=len(picked), latency=stall,
                                    handles=list(picked), requests=len(report),
                                    tokens=sum(self.node.evicted_cost.get(r, 0) for r in report))
                    if k < short:
                        return
            self.waiters.popleft()
            req.stall_us += stall
            self._grant(req, n, t)

    def on_online_released(self, n: int, t: int) -> None:
        keep = max(self.pool.online_in_use, self.params.uvm_prealloc_handles)
        if self.pool.release_reserved(self.online_reserved() - keep):
            self.node.kick_offline(t)


class PrismPolicy(MemoryPolicy):
    """Shared pool without reclamation: online waits until offline frees memory."""

    name = "prism"
    checks_faults = False

    def __init__(self, node: "NodeSim"):
        super().__init__(node)
        self.blocked: set[int] = set()

    def offline_may_map(self) -> bool:
        return not self.waiters

    def _serve(self, t: int) -> None:
        pool = self.pool
        while self.waiters:
            req, n = self.waiters[0]
            spare = self.online_reserved() - pool.online_in_use
            if spare < n:
                short = n - spare - pool.reserve_free(n - spare)
                if short > 0:
                    for hid, residents in pool.residency().items():
                        if not residents:
                            pool.unmap_offline(hid)
                    short -= pool.reserve_free(short)
                if short > 0:
                    if req.id not in self.blocked:
                        self.blocked.add(req.id)
                        self.sim.record("pressure", in_use=pool.online_in_use,
                                        held=self.online_reserved())
                    return
            self.waiters.popleft()
            self._grant(req, n, t)

    def on_online_released(self, n: int, t: int) -> None:
        if self.pool.release_reserved(self.online_reserved() - self.pool.online_in_use):
            self.node.kick_offline(t)

    def offline_free(self, req) -> None:
        super().offline_free(req)
        if self.waiters:
            self._serve(self.sim.now)


class StaticMemPolicy(MemoryPolicy):
    """Offline capped at the minimum free memory seen during calibration;
    online demand beyond the remainder kills the offline workload."""

    name = "static_mem"
    checks_faults = False

    def __init__(self, node: "NodeSim"):
        super().__init__(node)
        self.limit = 0
        self.calibrating = True
        self.peak = 0
        self.sim.on(EventKind.RESERVATION_TICK, self._on_calibrated)

    def start(self, t: int) -> None:
        span = int(self.node.horizon_us * self.params.static_calibration_fraction)
        self.sim.at(t + span, EventKind.RESERVATION_TICK, "calibrated")

    def _on_calibrated(self, ev: SimEvent) -> None:
        self.calibrating = False
        self.limit = max(0, self.pool.total_handles - self.peak)
        self.sim.record("static_limit", limit=self.limit, peak=self.peak)
        self.node.kick_offline(ev.time)

    def offline_map_budget(self) -> int:
        return max(0, self.limit - self.pool.count(HandleState.OFFLINE_MAPPED))

    def _serve(self, t: int) -> None:
        pool = self.pool
        while self.waiters:
            req, n = self.waiters[0]
            spare = self.online_reserved() - pool.online_in_use
            if spare < n:
                short = n - spare - pool.reserve_free(n - spare)
                if short > 0 and pool.count(HandleState.OFFLINE_MAPPED):
                    self.sim.record("pressure", in_use=pool.online_in_use,
                                    held=self.online_reserved())
                    self.node.kill_offline(t)
                    for hid in pool.ids(HandleState.OFFLINE_MAPPED):
                        pool.unmap_offline(hid)
                    short -= pool.reserve_free(short)
                if short > 0:
                    return
            self.waiters.popleft()
            self._grant(req, n, t)
            if self.calibrating:
                self.peak = max(self.peak, pool.online_in_use)

    def on_online_released(self, n: int, t: int) -> None:
        if self.pool.release_reserved(self.online_reserved() - self.pool.online_in_use):
            self.node.kick_offline(t)


class IsolatedMemory(MemoryPolicy):
    """Separate full-size pools for online and offline."""

    name = "isolated"
    checks_faults = False

    def __init__(self, node: "NodeSim"):
        super().__init__(node)
        p = self.params
        self._offline_pool = MemoryPool(p.total_handles, p.handle_pages, p.page_tokens)

    @property
    def offline_pool(self) -> MemoryPool:
        return self._offline_pool

    def _serve(self, t: int) -> None:
        pool = self.pool
        while self.waiters:
            req, n = self.waiters[0]
            spare = self.online_reserved() - pool.online_in_use
            if spare < n and pool.reserve_free(n - spare) < n - spare:
                return
            self.waiters.popleft()
            self._grant(req, n, t)

    def on_online_released(self, n: int, t: int) -> None:
        self.pool.release_reserved(self.online_reserved() - self.pool.online_in_use)


def make_memory(name: str, node: "NodeSim") -> MemoryPolicy:
    cls = {"our_mem": OurMemPolicy, "uvm": UvmPolicy, "prism": PrismPolicy,
           "static_mem": StaticMemPolicy, "isolated": IsolatedMemory}.get(name)
    if cls is None:
        raise ValueError(f"unknown memory policy {name!r}")
    return cls(node)
