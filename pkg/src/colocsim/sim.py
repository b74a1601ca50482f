"""One colocated node: an online continuous-batching engine and an offline
batch engine sharing GPUs under a compute policy and a memory policy."""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .baselines import PolicySelection, make_compute, make_memory
from .compute import node_toggle_latency, set_cooldown
from .core import (CostModel, EventKind, GpuSim, OfflineRequest, OfflineState, OnlineRequest,
                   OnlineState, Owner, SimEvent, SimulationError, Simulator)
from .trace import GenSpec, TraceRecord, gen_trace, load_trace, measure_gaps

SCHEMA_VERSION = 1


@dataclass
class SimParams:
    prefill_us_per_token: int = 10
    decode_us: int = 2000
    # compute gate
    toggle_latency_us: int = 1000
    lock_bypass: bool = True
    per_gpu_toggle_us: int = 700
    enable_latency_us: int = 0
    gpreempt_timeslice_us: int = 500
    # decode gaps: {"schedule": [...]} cycled, or {"uniform": [lo, hi]}
    decode_gap: dict = field(default_factory=lambda: {"uniform": [50, 300]})
    max_gap_us: Optional[int] = None
    calibrate_gap: bool = False
    # memory pool
    handle_pages: int = 64
    page_tokens: int = 16
    total_handles: int = 64
    remap_us_per_handle: int = 50
    eviction: str = "selective"
    reclaim_order: str = "compute_first"
    # MIAD reservation
    H_init: int = 8
    H_min: int = 1
    alpha: float = 1.5
    beta: float = 2.0
    T_init_us: int = 1_000_000
    delta_us: Optional[int] = None
    T_min_us: Optional[int] = None
    T_max_us: Optional[int] = None
    window_us: int = 60_000_000
    target_rate: float = 1.0
    # baselines
    uvm_penalty_us_per_page: int = 100
    uvm_prealloc_handles: int = 0
    static_calibration_fraction: float = 0.1
    # engines
    online_prefill_budget: int = 8192
    offline_prefill_budget: int = 8192
    offline_max_batch: int = 64
    sample_period_us: int = 100_000

    def __post_init__(self):
        if self.delta_us is None:
            self.delta_us = max(1, self.T_init_us // 10)
        if self.T_min_us is None:
            self.T_min_us = self.delta_us
        if self.T_max_us is None:
            self.T_max_us = self.window_us
        if self.eviction not in ("selective", "fifo"):
            raise ValueError(f"eviction must be 'selective' or 'fifo', got {self.eviction!r}")
        if self.reclaim_order not in ("compute_first", "memory_first"):
            raise ValueError(f"unknown reclaim_order {self.reclaim_order!r}")
        gap_kind = set(self.decode_gap)
        if gap_kind not in ({"schedule"}, {"uniform"}):
            raise ValueError("decode_gap must be {'schedule': [...]} or {'uniform': [lo, hi]}")
        vals = next(iter(self.decode_gap.values()))
        if not vals or min(vals) < 0:
            raise ValueError("decode gaps must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown parameter {unknown[0]!r}")
        return cls(**d)

    def gap_bound(self) -> int:
        if "schedule" in self.decode_gap:
            return max(self.decode_gap["schedule"])
        return int(self.decode_gap["uniform"][1])


@dataclass
class Scenario:
    name: str
    horizon_us: int
    seed: int = 0
    preset: str = "valve"
    gpus: int = 1
    online: list = field(default_factory=list)
    offline: list = field(default_factory=list)
    params: SimParams = field(default_factory=SimParams)
    base_dir: Optional[Path] = None

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "Scenario":
        d = dict(d)
        allowed = {"name", "horizon_us", "seed", "preset", "gpus", "online", "offline",
                   "params", "description"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ValueError(f"unknown scenario field {unknown[0]!r}")
        for key in ("name", "horizon_us"):
            if key not in d:
                raise ValueError(f"scenario missing field {key!r}")
        d.pop("description", None)
        params = SimParams.from_dict(d.pop("params", {}) or {})
        streams = {k: d.pop(k, []) for k in ("online", "offline")}
        for k, v in streams.items():
            if isinstance(v, dict):
                streams[k] = [v]
        sc = cls(params=params, base_dir=base_dir, **streams, **d)
        if sc.horizon_us < 0 or sc.gpus < 1:
            raise ValueError("horizon_us must be >= 0 and gpus >= 1")
        PolicySelection.parse(sc.preset)
        return sc

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Scenario":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        return {"name": self.name, "horizon_us": self.horizon_us, "seed": self.seed,
                "preset": self.preset, "gpus": self.gpus, "online": self.online,
                "offline": self.offline, "params": asdict(self.params)}

    def records(self, cls: str, seed: int) -> list[TraceRecord]:
        out: list[TraceRecord] = []
        for i, stream in enumerate(getattr(self, cls)):
            if "records" in stream:
                recs = [TraceRecord(r["arrival_us"], cls, r["prompt_tokens"], r["output_tokens"],
                                    r.get("stream_id", f"{cls}{i}"))
                        for r in stream["records"]]
            elif "trace" in stream:
                path = Path(stream["trace"])
                if not path.is_absolute() and self.base_dir is not None:
                    path = self.base_dir / path
                recs = [r for r in load_trace(path) if r.request_class == cls]
            else:
                spec = dict(stream)
                spec.setdefault("horizon_us", self.horizon_us)
                spec.setdefault("stream_id", f"{cls}{i}")
                spec["request_class"] = cls
                recs = gen_trace(GenSpec.from_dict(spec), seed)
            out.extend(recs)
        out.sort(key=lambda r: r.arrival_us)
        return out


@dataclass
class OfflineKernel:
    kind: str
    batch: list[int]
    work_us: int
    remaining_us: int
    started_at: Optional[int] = None
    end_ev: Optional[SimEvent] = None


class NodeSim:
    def __init__(self, scenario: Scenario, selection: Union[PolicySelection, str, None] = None,
                 seed: Optional[int] = None, max_gap_us: Optional[int] = None):
        if selection is None:
            selection = scenario.preset
        if isinstance(selection, str):
            selection = PolicySelection.parse(selection)
        self.scenario = scenario
        self.selection = selection
        self.seed = scenario.seed if seed is None else seed
        self.params = p = scenario.params
        self.horizon_us = scenario.horizon_us
        self.sim = Simulator()
        self.cost = CostModel(p.prefill_us_per_token, p.decode_us)
        self.isolated = selection.compute == "isolated"
        self.gpus = [GpuSim(i) for i in range(scenario.gpus)]
        self.offline_gpus = [GpuSim(scenario.gpus)] if self.isolated else self.gpus

        G = p.max_gap_us if p.max_gap_us is not None else p.gap_bound()
        if max_gap_us is not None:
            G = max_gap_us
        self.cooldown = set_cooldown(G)
        self.toggle_us = node_toggle_latency(scenario.gpus, p.toggle_latency_us,
                                             p.per_gpu_toggle_us, p.lock_bypass)
        self.compute = make_compute(selection.compute, self, self.cooldown, self.toggle_us)
        self.memory = make_memory(selection.memory, self)
        self._gap_rng = random.Random(f"gaps:{self.seed}")
        self._gap_i = 0

        self.online_reqs: dict[int, OnlineRequest] = {}
        self.on_ready: deque[int] = deque()
        self.on_decoding: list[int] = []
        self.on_kernel: Optional[dict] = None
        self.on_launch_ev: Optional[SimEvent] = None
        self.on_pages = 0

        self.offline_reqs: dict[int, OfflineRequest] = {}
        self.off_waiting: deque[int] = deque()
        self.off_running: list[int] = []
        self.kernel: Optional[OfflineKernel] = None
        self.evicted_cost: dict[int, int] = {}

        self.offline_tokens = 0
        self.offline_tokens_lost = 0
        self.offline_work_demanded = 0
        self.offline_work_executed = 0
        self.online_delays: list[int] = []
        self.faults = 0

        s = self.sim
        s.on(EventKind.ARRIVAL, self._on_arrival)
        s.on(EventKind.ITERATION_START, self._on_iteration_start)
        s.on(EventKind.ITERATION_END, self._on_iteration_end)
        s.on(EventKind.MONITOR_TICK, self._on_sample)

        online = scenario.records("online", self.seed)
        offline = scenario.records("offline", self.seed)
        self._online_records = online
        self._offline_records = offline
        cap = p.total_handles * p.handle_pages
        for i, r in enumerate(offline):
            if self.memory.offline_pool.pages_for(r.prompt_tokens + r.output_tokens) > cap:
                raise SimulationError(f"offline request {i} exceeds pool capacity")
        for i, r in enumerate(online):
            s.at(r.arrival_us, EventKind.ARRIVAL, ("online", i))
        for i, r in enumerate(offline):
            s.at(r.arrival_us, EventKind.ARRIVAL, ("offline", i))

    # --- run ---------------------------------------------------------------

    def run(self) -> "NodeSim":
        s = self.sim
        s.record("meta", schema=SCHEMA_VERSION, scenario=self.scenario.name,
                 preset=self.selection.name, seed=self.seed, horizon_us=self.horizon_us,
                 gpus=len(self.gpus), G=self.cooldown.G, T_cool=self.cooldown.T_cool,
                 toggle_us=self.toggle_us, window_us=self.params.window_us)
        self.memory.start(0)
        if self.horizon_us > 0:
            s.at(0, EventKind.MONITOR_TICK)
        # events at exactly the horizon are left unprocessed
        s.run(until=max(0, self.horizon_us - 1))
        s.now = self.horizon_us
        self._close_open_intervals(self.horizon_us)
        s.record("end")
        return self

    def _close_open_intervals(self, t: int) -> None:
        if self.on_kernel is not None:
            self._record_busy("online", self.on_kernel["start"], t)
        k = self.kernel
        if k is not None and k.started_at is not None:
            self.offline_work_executed += t - k.started_at
            self._record_busy("offline", k.started_at, t)

    def _record_busy(self, cls: str, start: int, end: int) -> None:
        if end <= start:
            return
        gpus = self.gpus if cls == "online" else self.offline_gpus
        for g in gpus:
            g.add_busy(cls, start, end)
        self.sim.record("busy", cls=cls, start=start, end=end)

    def _on_sample(self, ev: SimEvent) -> None:
        pool = self.memory.pool
        self.sim.record("kv", online=pool.online_in_use, reserved=self.memory.online_reserved(),
                        offline_pages=self.memory.offline_pool.offline_used_pages())
        self.sim.at(ev.time + self.params.sample_period_us, EventKind.MONITOR_TICK)

    # --- dispatch ------------------------------------------------------------

    def _on_arrival(self, ev: SimEvent) -> None:
        kind, i = ev.payload
        if kind == "online":
            self._online_arrival(i, ev.time)
        elif kind == "ready":
            self._online_ready(i, ev.time)
        else:
            self._offline_arrival(i, ev.time)

    def _on_iteration_start(self, ev: SimEvent) -> None:
        lane, phase, requested = ev.payload
        self.on_launch_ev = None
        if phase == "gap":
            self._online_launch(ev.time)
        else:
            self._online_start_kernel(ev.time, ev.time - requested)

    def _on_iteration_end(self, ev: SimEvent) -> None:
        if ev.payload == "online":
            self._online_end(ev.time)
        else:
            self._offline_end(ev.time)

    # --- online engine -----------------------------------------------------------

    def _online_arrival(self, i: int, t: int) -> None:
        rec = self._online_records[i]
        req = OnlineRequest(i, t, rec.prompt_tokens, rec.output_tokens)
        self.online_reqs[i] = req
        self.sim.record("online_arrival", id=i, prompt=rec.prompt_tokens,
                        output=rec.output_tokens)
        pool = self.memory.pool
        before = pool.handles_for_pages(self.on_pages)
        self.on_pages += pool.pages_for(req.kv_tokens)
        req.handles = pool.handles_for_pages(self.on_pages) - before
        self.memory.online_admit(req, req.handles, t)

    def online_memory_ready(self, req: OnlineRequest, t_ready: int) -> None:
        if t_ready > self.sim.now:
            self.sim.at(t_ready, EventKind.ARRIVAL, ("ready", req.id))
        else:
            self._online_ready(req.id, t_ready)

    def _online_ready(self, rid: int, t: int) -> None:
        self.on_ready.append(rid)
        if self.on_kernel is None and self.on_launch_ev is None:
            # launch after every other event at this instant, so simultaneous
            # arrivals share the first prefill
            self.on_launch_ev = self.sim.at(t, EventKind.ITERATION_START, ("online", "gap", t))

    def _online_launch(self, t: int) -> None:
        if not (self.on_ready or self.on_decoding):
            return
        ready = self.compute.on_online_busy(t)
        if ready > t:
            self.on_launch_ev = self.sim.at(ready, EventKind.ITERATION_START,
                                            ("online", "kernel", t))
        else:
            self._online_start_kernel(t, 0)

    def _online_start_kernel(self, t: int, delay: int) -> None:
        k = self.kernel
        if not self.isolated and k is not None and k.started_at is not None:
            raise SimulationError(f"online kernel at t={t} while offline kernel runs")
        if self.on_ready:
            batch, tokens = [], 0
            budget = self.params.online_prefill_budget
            while self.on_ready:
                req = self.online_reqs[self.on_ready[0]]
                if batch and tokens + req.prompt_tokens > budget:
                    break
                self.on_ready.popleft()
                batch.append(req.id)
                tokens += req.prompt_tokens
                req.state = OnlineState.PREFILLING
            stall = sum(self.online_reqs[rid].stall_us for rid in batch)
            for rid in batch:
                self.online_reqs[rid].stall_us = 0
            kind, dur = "prefill", self.cost.prefill(tokens) + stall
        else:
            batch, kind, dur = list(self.on_decoding), "decode", self.cost.decode()
        if delay:
            self.online_delays.append(delay)
            self.sim.record("online_delay", d=delay)
        for g in self.gpus:
            g.compute_owner = Owner.ONLINE
        self.on_kernel = {"kind": kind, "batch": batch, "start": t}
        self.sim.at(t + dur, EventKind.ITERATION_END, "online")

    def _online_end(self, t: int) -> None:
        k = self.on_kernel
        self.on_kernel = None
        self._record_busy("online", k["start"], t)
        for g in self.gpus:
            g.compute_owner = Owner.IDLE
        done = []
        for rid in k["batch"]:
            req = self.online_reqs[rid]
            req.emit(t)
            if req.state is OnlineState.PREFILLING:
                req.state = OnlineState.DECODING
                self.on_decoding.append(rid)
            if req.finished:
                req.state = OnlineState.DONE
                req.done_at = t
                self.on_decoding.remove(rid)
                done.append(rid)
        self.sim.record("online_tokens", ids=k["batch"])
        for rid in done:
            self.sim.record("online_done", id=rid)
        more = bool(self.on_ready or self.on_decoding)
        gap = self._next_gap() if more else 0
        if gap > 0 or not more:
            self.compute.on_online_idle(t)
        pool = self.memory.pool
        for rid in done:
            req = self.online_reqs[rid]
            before = pool.handles_for_pages(self.on_pages)
            self.on_pages -= pool.pages_for(req.kv_tokens)
            self.memory.online_release(req, before - pool.handles_for_pages(self.on_pages), t)
        if self.on_kernel is not None or self.on_launch_ev is not None:
            return
        if self.on_ready or self.on_decoding:
            if gap > 0:
                self.on_launch_ev = self.sim.at(t + gap, EventKind.ITERATION_START,
                                                ("online", "gap", t))
            else:
                self._online_launch(t)

    def _next_gap(self) -> int:
        g = self.params.decode_gap
        if "schedule" in g:
            sched = g["schedule"]
            val = sched[self._gap_i % len(sched)]
            self._gap_i += 1
            return int(val)
        lo, hi = g["uniform"]
        return self._gap_rng.randint(int(lo), int(hi))

    # --- offline engine ------------------------------------------------------------

    def _offline_arrival(self, i: int, t: int) -> None:
        rec = self._offline_records[i]
        self.offline_reqs[i] = OfflineRequest(i, rec.prompt_tokens, rec.output_tokens, arrival=t)
        self.off_waiting.append(i)
        self.kick_offline(t)

    def offline_kernel_running(self) -> bool:
        return self.kernel is not None and self.kernel.started_at is not None

    def offline_kernel_remaining(self, t: int) -> int:
        k = self.kernel
        if k is None or k.started_at is None:
            return 0
        return k.remaining_us - (t - k.started_at)

    def pause_offline(self, t: int) -> Optional[int]:
        k = self.kernel
        if k is None or k.started_at is None:
            return None
        ran = t - k.started_at
        k.remaining_us -= ran
        self.offline_work_executed += ran
        self._record_busy("offline", k.started_at, t)
        k.started_at = None
        self.sim.cancel(k.end_ev)
        k.end_ev = None
        for g in self.offline_gpus:
            g.compute_owner = Owner.IDLE
        self.sim.record("offline_pause", remaining=k.remaining_us)
        return k.remaining_us

    def _start_kernel(self, k: OfflineKernel, t: int) -> None:
        k.started_at = t
        k.end_ev = self.sim.at(t + k.remaining_us, EventKind.ITERATION_END, "offline")
        for g in self.offline_gpus:
            g.compute_owner = Owner.OFFLINE

    def kick_offline(self, t: int) -> None:
        if not self.compute.offline_may_run():
            return
        if not self.isolated and self.on_kernel is not None:
            return
        k = self.kernel
        if k is not None:
            if k.started_at is None:
                self._start_kernel(k, t)
                self.sim.record("offline_resume", remaining=k.remaining_us)
            return
        self._offline_admit(t)
        k = self._offline_build()
        if k is not None:
            self.kernel = k
            self.offline_work_demanded += k.work_us
            self._start_kernel(k, t)

    def _offline_admit(self, t: int) -> None:
        pool = self.memory.offline_pool
        while self.off_waiting and len(self.off_running) < self.params.offline_max_batch:
            req = self.offline_reqs[self.off_waiting[0]]
            pages = self.memory.offline_alloc(req, pool.pages_for(req.kv_tokens), t)
            if pages is None:
                break
            self.off_waiting.popleft()
            req.pages = pages
            req.state = OfflineState.RUNNING
            req.needs_prefill = True
            self.off_running.append(req.id)

    def _offline_build(self) -> Optional[OfflineKernel]:
        pending = [rid for rid in self.off_running if self.offline_reqs[rid].needs_prefill]
        if pending:
            batch, tokens = [], 0
            for rid in pending:
                c = self.offline_reqs[rid].cost
                if batch and tokens + c > self.params.offline_prefill_budget:
                    break
                batch.append(rid)
                tokens += c
            dur = self.cost.prefill(tokens)
            return OfflineKernel("prefill", batch, dur, dur)
        if self.off_running:
            dur = self.cost.decode()
            return OfflineKernel("decode", list(self.off_running), dur, dur)
        return None

    def _offline_end(self, t: int) -> None:
        k = self.kernel
        self.kernel = None
        self.offline_work_executed += t - k.started_at
        self._record_busy("offline", k.started_at, t)
        for g in self.offline_gpus:
            g.compute_owner = Owner.IDLE
        produced, finished = 0, []
        for rid in k.batch:
            req = self.offline_reqs[rid]
            if req.state is not OfflineState.RUNNING:
                continue  # invalidated while this kernel was in flight
            req.needs_prefill = False
            req.generated_tokens += 1
            produced += 1
            if req.generated_tokens >= req.output_tokens:
                req.state = OfflineState.DONE
                self.memory.offline_free(req)
                req.pages = []
                self.off_running.remove(rid)
                finished.append(rid)
        self.offline_tokens += produced
        self.sim.record("offline_tokens", n=produced, kind=k.kind, done=finished)
        self.kick_offline(t)

    # --- memory-policy callbacks -------------------------------------------------------

    def check_page_access(self, touched: set[int]) -> None:
        """Record a fault if a running offline kernel touches pages being unmapped."""
        k = self.kernel
        if k is None or k.started_at is None:
            return
        hit = sorted(touched.intersection(k.batch))
        if hit:
            self.faults += 1
            self.sim.record("fault", requests=hit)

    def invalidate_offline(self, report: dict) -> None:
        evicted = []
        for rid in sorted(report):
            req = self.offline_reqs[rid]
            self.sim.record("invalidate", request_id=rid,
                            invalidated_page_ids=sorted(report[rid]), cost=req.cost)
            self.evicted_cost[rid] = req.cost
            self.memory.offline_free(req)
            req.pages = []
            req.state = OfflineState.EVICTED_WAITING
            req.needs_prefill = True
            self.off_running.remove(rid)
            evicted.append(rid)
        self.off_waiting.extendleft(reversed(evicted))

    def kill_offline(self, t: int) -> None:
        k = self.kernel
        if k is not None:
            if k.started_at is not None:
                self.offline_work_executed += t - k.started_at
                self._record_busy("offline", k.started_at, t)
                self.sim.cancel(k.end_ev)
            self.kernel = None
        lost = 0
        victims = []
        for rid in list(self.off_running) + list(self.off_waiting):
            req = self.offline_reqs[rid]
            lost += req.generated_tokens
            if req.pages:
                self.memory.offline_free(req)
                req.pages = []
            req.generated_tokens = 0
            req.needs_prefill = True
            req.state = OfflineState.WAITING
            victims.append(rid)
        self.offline_tokens_lost += lost
        self.off_running = []
        self.off_waiting = deque(victims)
        self.sim.record("kill", lost=lost, requests=len(victims))

    # --- derived -------------------------------------------------------------------

    def decode_spans(self) -> list[tuple[int, Optional[int]]]:
        return [(r.first_token_at, r.done_at) for r in self.online_reqs.values()
                if r.first_token_at is not None]

    def gap_distribution(self):
        return measure_gaps(self.gpus[0].busy_intervals["online"], self.decode_spans())


def calibrate_max_gap(scenario: Scenario, seed: int) -> int:
    """Largest decode gap seen when the online trace runs alone."""
    node = NodeSim(scenario, "standalone", seed).run()
    return node.gap_distribution().max_gap


def simulate(scenario: Scenario, preset: Union[str, PolicySelection, None] = None,
             seed: Optional[int] = None, horizon_us: Optional[int] = None) -> NodeSim:
    if horizon_us is not None:
        scenario = Scenario(**{**scenario.__dict__, "horizon_us": horizon_us})
    seed = scenario.seed if seed is None else seed
    G = None
    if scenario.params.calibrate_gap:
        G = calibrate_max_gap(scenario, seed)
    return NodeSim(scenario, preset, seed, max_gap_us=G).run()
