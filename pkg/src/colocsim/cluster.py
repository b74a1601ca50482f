"""Offline-throughput prediction and SLA-aware placement across nodes.

Predicted normalized throughput of an offline job on a node is the product
of three factors: the share of compute timeslices the online side leaves
idle, a memory factor from the job's memory/throughput curve, and (for
multi-GPU jobs) how well idle time lines up across the GPUs it would use.
"""

from __future__ import annotations

import bisect
import itertools
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

ALIGNMENT_THRESHOLD = 0.95
VIOLATION_WINDOWS = 3
MONITOR_WINDOW_US = 60_000_000
TIMESLICE_US = 100_000

Interval = tuple[int, int]


class ProfileError(ValueError):
    """A node or job profile is malformed; the message names the field."""


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


@dataclass(frozen=True)
class NodeProfile:
    node_id: str
    idle_fraction: float
    memory_trace: tuple[float, ...]
    gpus: int = 1
    # (i, j) with i < j -> (T_intersection, T_union)
    pairwise_busy: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.idle_fraction <= 1.0:
            raise ProfileError("idle_fraction must lie in [0, 1]")
        if self.gpus < 1:
            raise ProfileError("gpus must be >= 1")
        for pair, (inter, union) in self.pairwise_busy.items():
            if inter < 0 or inter > union:
                raise ProfileError(f"pairwise_busy {pair}: need 0 <= intersection <= union")

    def alignment(self, i: int, j: int) -> Optional[float]:
        key = (min(i, j), max(i, j))
        if key not in self.pairwise_busy:
            return None
        inter, union = self.pairwise_busy[key]
        return 1.0 if union == 0 else inter / union


@dataclass(frozen=True)
class JobProfile:
    workload_id: str
    # sorted (memory, tokens/s) breakpoints, linearly interpolated, flat outside
    throughput_curve: tuple[tuple[float, float], ...]
    M_req: float
    M_max: float
    MAC: float = 0.0
    gpus_needed: int = 1
    sla_fraction: float = 0.5

    def __post_init__(self):
        curve = self.throughput_curve
        if not curve:
            raise ProfileError("throughput_curve must not be empty")
        xs = [m for m, _ in curve]
        ys = [y for _, y in curve]
        if xs != sorted(xs) or len(set(xs)) != len(xs):
            raise ProfileError("throughput_curve memory points must be strictly increasing")
        if any(b < a for a, b in zip(ys, ys[1:])):
            raise ProfileError("throughput_curve must be non-decreasing")
        if self.M_max <= 0:
            raise ProfileError("M_max must be positive")
        if not 0.0 < self.sla_fraction <= 1.0:
            raise ProfileError("sla_fraction must lie in (0, 1]")
        if self.gpus_needed < 1:
            raise ProfileError("gpus_needed must be >= 1")
        if self.MAC < 0:
            raise ProfileError("MAC must be non-negative")

    def throughput(self, m: float) -> float:
        curve = self.throughput_curve
        xs = [x for x, _ in curve]
        if m <= xs[0]:
            return curve[0][1]
        if m >= xs[-1]:
            return curve[-1][1]
        i = bisect.bisect_right(xs, m)
        (x0, y0), (x1, y1) = curve[i - 1], curve[i]
        return y0 + (y1 - y0) * (m - x0) / (x1 - x0)


# --- throughput model -------------------------------------------------------------

def memory_factor(job: JobProfile, trace: Sequence[float]) -> float:
    """Expected share of saturated throughput under the available-memory trace."""
    if not trace:
        raise ValueError("memory trace is empty")
    mean_thr = statistics.fmean(job.throughput(m) for m in trace)
    mean_deficit = statistics.fmean(max(0.0, job.M_req - m) for m in trace)
    peak = job.throughput(job.M_max)
    if peak <= 0:
        return 0.0
    return _clamp01((mean_thr - job.MAC * mean_deficit) / peak)


def merge_intervals(ivs: Iterable[Interval]) -> list[Interval]:
    out: list[list[int]] = []
    for s, e in sorted(ivs):
        if e < s:
            raise ValueError(f"malformed interval ({s}, {e})")
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        elif e > s:
            out.append([s, e])
    return [(s, e) for s, e in out]


def _length(ivs: Sequence[Interval]) -> int:
    return sum(e - s for s, e in ivs)


def intersection_length(a: Sequence[Interval], b: Sequence[Interval]) -> int:
    a, b = merge_intervals(a), merge_intervals(b)
    i = j = total = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return total


def multi_alignment(busy_i: Sequence[Interval], busy_j: Sequence[Interval]) -> float:
    """Overlap over union of two busy-interval sets (1.0 if both are empty)."""
    inter = intersection_length(busy_i, busy_j)
    union = _length(merge_intervals(busy_i)) + _length(merge_intervals(busy_j)) - inter
    return 1.0 if union == 0 else inter / union


def pairwise_from_busy(gpu_busy: Sequence[Sequence[Interval]]) -> dict:
    out = {}
    for i, j in itertools.combinations(range(len(gpu_busy)), 2):
        inter = intersection_length(gpu_busy[i], gpu_busy[j])
        union = (_length(merge_intervals(gpu_busy[i])) + _length(merge_intervals(gpu_busy[j]))
                 - inter)
        out[(i, j)] = (inter, union)
    return out


def idle_fraction(online_busy: Sequence[Interval], horizon_us: int,
                  timeslice_us: int = TIMESLICE_US) -> float:
    """Fraction of timeslices with no online busy time at all."""
    if horizon_us <= 0:
        return 0.0
    n = -(-horizon_us // timeslice_us)
    busy_slices = set()
    for s, e in merge_intervals(online_busy):
        e = min(e, horizon_us)
        if e > s:
            busy_slices.update(range(s // timeslice_us, (e - 1) // timeslice_us + 1))
    return (n - len(busy_slices)) / n


def best_gpu_subset(node: NodeProfile, k: int,
                    gpus: Optional[Sequence[int]] = None) -> tuple[Optional[tuple[int, ...]], float]:
    """The ``k`` GPUs maximizing the minimum pairwise alignment.

    Returns ``(None, 0.0)`` when fewer than ``k`` GPUs are available or a needed
    pair has no alignment data. Ties go to the lexicographically first subset.
    """
    pool = sorted(range(node.gpus) if gpus is None else gpus)
    if len(pool) < k:
        return None, 0.0
    if k == 1:
        return (pool[0],), 1.0
    best, best_score = None, -1.0
    for combo in itertools.combinations(pool, k):
        scores = [node.alignment(i, j) for i, j in itertools.combinations(combo, 2)]
        if any(s is None for s in scores):
            continue
        score = min(scores)
        if score > best_score:
            best, best_score = combo, score
    if best is None:
        return None, 0.0
    return best, best_score


def predict_fraction(job: JobProfile, node: NodeProfile,
                     gpus: Optional[Sequence[int]] = None) -> float:
    _, p_multi = best_gpu_subset(node, job.gpus_needed, gpus)
    return node.idle_fraction * memory_factor(job, node.memory_trace) * p_multi


def estimate_mac(deficits: Sequence[float], losses: Sequence[float]) -> float:
    """Least-squares slope (through the origin) of throughput loss vs memory deficit."""
    if len(deficits) != len(losses) or not deficits:
        raise ValueError("need equal-length, non-empty calibration samples")
    sxx = sum(x * x for x in deficits)
    if sxx == 0:
        return 0.0
    return max(0.0, sum(x * y for x, y in zip(deficits, losses)) / sxx)


# --- placement --------------------------------------------------------------------

@dataclass
class Placement:
    assignments: dict[str, str] = field(default_factory=dict)
    gpus: dict[str, list[int]] = field(default_factory=dict)
    predicted_fraction: dict[str, float] = field(default_factory=dict)
    candidates: dict[str, dict[str, float]] = field(default_factory=dict)
    pending: dict[str, dict[str, str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"assignments": self.assignments, "gpus": self.gpus,
                "predicted_fraction": self.predicted_fraction,
                "candidates": self.candidates, "pending": self.pending}


def place(jobs: Sequence[JobProfile], nodes: Sequence[NodeProfile],
          free_gpus: Optional[dict[str, list[int]]] = None,
          threshold: float = ALIGNMENT_THRESHOLD) -> Placement:
    """Greedy placement in job order onto the feasible node with the highest prediction."""
    free = {n.node_id: list(range(n.gpus)) for n in nodes}
    if free_gpus:
        free.update({k: list(v) for k, v in free_gpus.items()})
    out = Placement()
    for job in jobs:
        feasible: list[tuple[float, str, tuple[int, ...]]] = []
        reasons: dict[str, str] = {}
        cands: dict[str, float] = {}
        for node in sorted(nodes, key=lambda n: n.node_id):
            avail = free[node.node_id]
            if len(avail) < job.gpus_needed:
                reasons[node.node_id] = (f"insufficient free GPUs ({len(avail)} < "
                                         f"{job.gpus_needed})")
                continue
            subset, p_multi = best_gpu_subset(node, job.gpus_needed, avail)
            if subset is None:
                reasons[node.node_id] = "missing pairwise alignment data"
                continue
            pred = node.idle_fraction * memory_factor(job, node.memory_trace) * p_multi
            cands[node.node_id] = pred
            if job.gpus_needed > 1 and p_multi < threshold:
                reasons[node.node_id] = f"pairwise alignment below {threshold:g}"
            elif pred < job.sla_fraction:
                reasons[node.node_id] = (f"predicted fraction {pred:.4f} below SLA "
                                         f"{job.sla_fraction:g}")
            else:
                feasible.append((pred, node.node_id, subset))
        out.candidates[job.workload_id] = cands
        if not feasible:
            out.pending[job.workload_id] = reasons
            continue
        # highest prediction; equal predictions go to the smallest node id
        pred, nid, subset = min(feasible, key=lambda f: (-f[0], f[1]))
        out.assignments[job.workload_id] = nid
        out.gpus[job.workload_id] = list(subset)
        out.predicted_fraction[job.workload_id] = pred
        free[nid] = [g for g in free[nid] if g not in subset]
    return out


class SlaMonitor:
    """Evicts a job after ``v`` consecutive windows below its SLA fraction."""

    def __init__(self, v: int = VIOLATION_WINDOWS, window_us: int = MONITOR_WINDOW_US):
        if v < 1:
            raise ValueError("v must be >= 1")
        self.v = v
        self.window_us = window_us
        self.streak: dict[str, int] = {}

    def tick(self, placement: Placement, achieved: dict[str, float], sla: dict[str, float],
             t: int) -> list[str]:
        evicted = []
        for job in sorted(placement.assignments):
            if achieved.get(job, 0.0) < sla[job]:
                self.streak[job] = self.streak.get(job, 0) + 1
            else:
                self.streak[job] = 0
            if self.streak[job] >= self.v:
                evicted.append(job)
                self.streak.pop(job)
        return evicted


class ClusterScheduler:
    """Placement rounds plus the violation monitor, closing the loop on evictions."""

    def __init__(self, nodes: Sequence[NodeProfile], monitor: Optional[SlaMonitor] = None):
        self.nodes = list(nodes)
        self.monitor = monitor or SlaMonitor()
        self.jobs: dict[str, JobProfile] = {}
        self.pending: list[str] = []
        self.placement = Placement()
        self.log: list[dict] = []

    def submit(self, job: JobProfile) -> None:
        self.jobs[job.workload_id] = job
        self.pending.append(job.workload_id)

    def _free_gpus(self) -> dict[str, list[int]]:
        used: dict[str, set[int]] = {}
        for job, nid in self.placement.assignments.items():
            used.setdefault(nid, set()).update(self.placement.gpus[job])
        return {n.node_id: [g for g in range(n.gpus) if g not in used.get(n.node_id, ())]
                for n in self.nodes}

    def schedule_round(self, t: int = 0) -> Placement:
        jobs = [self.jobs[j] for j in self.pending]
        rnd = place(jobs, self.nodes, free_gpus=self._free_gpus())
        for job, nid in rnd.assignments.items():
            self.placement.assignments[job] = nid
            self.placement.gpus[job] = rnd.gpus[job]
            self.placement.predicted_fraction[job] = rnd.predicted_fraction[job]
            self.log.append({"t": t, "ev": "place", "job": job, "node": nid})
        self.placement.pending = rnd.pending
        self.pending = [j for j in self.pending if j not in rnd.assignments]
        return rnd

    def monitor_tick(self, achieved: dict[str, float], t: int) -> list[str]:
        sla = {j: self.jobs[j].sla_fraction for j in self.placement.assignments}
        evicted = self.monitor.tick(self.placement, achieved, sla, t)
        for job in evicted:
            self.placement.assignments.pop(job)
            self.placement.gpus.pop(job)
            self.placement.predicted_fraction.pop(job)
            self.pending.append(job)
            self.log.append({"t": t, "ev": "evict", "job": job})
        return evicted


# --- JSON profiles ----------------------------------------------------------------

def _req(d: dict, key: str, kind, where: str):
    if key not in d:
        raise ProfileError(f"{where}: missing field {key!r}")
    v = d[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, kind) or isinstance(v, bool):
        raise ProfileError(f"{where}: field {key!r} has wrong type")
    return v


def node_from_dict(d: dict, where: str = "node") -> NodeProfile:
    allowed = {"node_id", "idle_fraction", "memory_trace", "gpus", "pairwise", "gpu_busy"}
    extra = sorted(set(d) - allowed)
    if extra:
        raise ProfileError(f"{where}: unknown field {extra[0]!r}")
    nid = str(_req(d, "node_id", (str, int), where))
    where = f"node {nid}"
    trace = _req(d, "memory_trace", list, where)
    if not trace:
        raise ProfileError(f"{where}: field 'memory_trace' must not be empty")
    gpus = d.get("gpus", 1)
    pairwise = {}
    for i, entry in enumerate(d.get("pairwise", [])):
        pw = f"{where} pairwise[{i}]"
        pair = _req(entry, "gpus", list, pw)
        inter = _req(entry, "intersection", float, pw)
        union = _req(entry, "union", float, pw)
        if len(pair) != 2:
            raise ProfileError(f"{pw}: field 'gpus' must name two GPUs")
        pairwise[(min(pair), max(pair))] = (inter, union)
    if "gpu_busy" in d:
        busy = [[tuple(iv) for iv in d["gpu_busy"][str(g)]] for g in range(gpus)]
        pairwise.update(pairwise_from_busy(busy))
    try:
        return NodeProfile(nid, _req(d, "idle_fraction", float, where),
                           tuple(float(x) for x in trace), gpus, pairwise)
    except ProfileError as exc:
        raise ProfileError(f"{where}: {exc}") from None


def job_from_dict(d: dict, where: str = "job") -> JobProfile:
    allowed = {"workload_id", "throughput_curve", "M_req", "M_max", "MAC", "gpus_needed",
               "sla_fraction"}
    extra = sorted(set(d) - allowed)
    if extra:
        raise ProfileError(f"{where}: unknown field {extra[0]!r}")
    wid = str(_req(d, "workload_id", (str, int), where))
    where = f"job {wid}"
    curve = _req(d, "throughput_curve", list, where)
    try:
        pts = tuple((float(m), float(y)) for m, y in curve)
    except (TypeError, ValueError):
        raise ProfileError(f"{where}: field 'throughput_curve' must be [memory, tput] pairs") from None
    try:
        return JobProfile(wid, pts, _req(d, "M_req", float, where), _req(d, "M_max", float, where),
                          float(d.get("MAC", 0.0)), int(d.get("gpus_needed", 1)),
                          float(d.get("sla_fraction", 0.5)))
    except ProfileError as exc:
        raise ProfileError(f"{where}: {exc}") from None


def _load_list(path: Union[str, Path], key: str) -> list[dict]:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        if key not in doc:
            raise ProfileError(f"{path}: missing field {key!r}")
        doc = doc[key]
    if not isinstance(doc, list):
        raise ProfileError(f"{path}: field {key!r} must be a list")
    return doc


def load_nodes(path: Union[str, Path]) -> list[NodeProfile]:
    return [node_from_dict(d, f"nodes[{i}]") for i, d in enumerate(_load_list(path, "nodes"))]


def load_jobs(path: Union[str, Path]) -> list[JobProfile]:
    return [job_from_dict(d, f"jobs[{i}]") for i, d in enumerate(_load_list(path, "jobs"))]


def node_profile_from_run(node, node_id: str = "n0") -> NodeProfile:
    """Telemetry snapshot of a finished :class:`~colocsim.sim.NodeSim` run."""
    horizon = node.horizon_us
    busy = [g.busy_intervals["online"] for g in node.gpus]
    trace = tuple(float(node.params.total_handles - e["reserved"])
                  for e in node.sim.log if e["ev"] == "kv")
    return NodeProfile(node_id, idle_fraction(busy[0], horizon), trace or (0.0,),
                       len(node.gpus), pairwise_from_busy(busy))
