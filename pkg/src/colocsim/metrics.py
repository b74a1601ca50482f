"""Run reports and evaluation metrics.

A :class:`RunReport` is built either straight from a finished
:class:`~colocsim.sim.NodeSim` or by replaying its persisted event log; both
paths reduce to the same primitive inputs, so the results are identical.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Optional, Sequence, Union

from .trace import busy_fraction_series

if TYPE_CHECKING:
    from .sim import NodeSim

REPORT_SCHEMA = 1
CSV_FIELDS = (
    "scenario", "preset", "seed", "horizon_us", "gpus", "online_requests", "online_done",
    "ttft_mean_us", "ttft_p50_us", "ttft_p95_us", "ttft_p99_us",
    "tpot_mean_us", "tpot_p50_us", "tpot_p95_us", "tpot_p99_us",
    "offline_tokens", "offline_tokens_lost", "offline_tokens_per_s", "utilization",
    "online_busy_us", "offline_busy_us", "disables", "max_disables_per_request",
    "reclaims", "reclaim_latency_mean_us", "pressure_events", "pressure_rate",
    "windows", "kills", "faults", "evictions", "max_online_delay_us",
)


def percentile(xs: Sequence[float], q: float) -> float:
    """Nearest-rank percentile; 0.0 for an empty sequence."""
    if not xs:
        return 0.0
    s = sorted(xs)
    rank = max(1, math.ceil(q / 100 * len(s)))
    return float(s[rank - 1])


def _mean(xs: Sequence[float]) -> float:
    return statistics.fmean(xs) if xs else 0.0


@dataclass
class RunReport:
    scenario: str
    preset: str
    seed: int
    horizon_us: int
    gpus: int
    # per online request id
    arrivals: dict[int, int] = field(default_factory=dict)
    ttft: dict[int, int] = field(default_factory=dict)
    tpot: dict[int, float] = field(default_factory=dict)
    attributed_disables: dict[int, int] = field(default_factory=dict)
    online_done: int = 0
    offline_tokens: int = 0
    offline_tokens_lost: int = 0
    online_busy_us: int = 0
    offline_busy_us: int = 0
    online_util_series: list[float] = field(default_factory=list)
    offline_util_series: list[float] = field(default_factory=list)
    disables: int = 0
    reclaim_latencies: list[int] = field(default_factory=list)
    pressure_events: int = 0
    window_us: int = 0
    windows: int = 0
    kills: int = 0
    faults: int = 0
    evictions: int = 0
    max_online_delay_us: int = 0
    schema: int = REPORT_SCHEMA

    # --- derived ---------------------------------------------------------------
    @property
    def retained_tokens(self) -> int:
        return self.offline_tokens - self.offline_tokens_lost

    @property
    def offline_tokens_per_s(self) -> float:
        return self.retained_tokens * 1e6 / self.horizon_us if self.horizon_us else 0.0

    @property
    def utilization(self) -> float:
        return utilization_improvement(self)

    @property
    def max_disables_per_request(self) -> int:
        return max(self.attributed_disables.values(), default=0)

    @property
    def pressure_rate(self) -> float:
        """Pressure events per reservation window."""
        if not self.horizon_us or not self.window_us:
            return 0.0
        return self.pressure_events * self.window_us / self.horizon_us

    def summary(self) -> dict:
        ttft = [self.ttft[k] for k in sorted(self.ttft)]
        tpot = [self.tpot[k] for k in sorted(self.tpot)]
        row = {
            "scenario": self.scenario, "preset": self.preset, "seed": self.seed,
            "horizon_us": self.horizon_us, "gpus": self.gpus,
            "online_requests": len(self.arrivals), "online_done": self.online_done,
            "ttft_mean_us": _mean(ttft), "tpot_mean_us": _mean(tpot),
            "offline_tokens": self.offline_tokens, "offline_tokens_lost": self.offline_tokens_lost,
            "offline_tokens_per_s": self.offline_tokens_per_s, "utilization": self.utilization,
            "online_busy_us": self.online_busy_us, "offline_busy_us": self.offline_busy_us,
            "disables": self.disables, "max_disables_per_request": self.max_disables_per_request,
            "reclaims": len(self.reclaim_latencies),
            "reclaim_latency_mean_us": _mean(self.reclaim_latencies),
            "pressure_events": self.pressure_events, "pressure_rate": self.pressure_rate,
            "windows": self.windows, "kills": self.kills, "faults": self.faults,
            "evictions": self.evictions, "max_online_delay_us": self.max_online_delay_us,
        }
        for q in (50, 95, 99):
            row[f"ttft_p{q}_us"] = percentile(ttft, q)
            row[f"tpot_p{q}_us"] = percentile(tpot, q)
        return {k: row[k] for k in CSV_FIELDS}

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("arrivals", "ttft", "tpot", "attributed_disables"):
            d[key] = {str(k): v for k, v in sorted(d[key].items())}
        d["summary"] = self.summary()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        d.pop("summary", None)
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        for key in ("arrivals", "ttft", "tpot", "attributed_disables"):
            d[key] = {int(k): v for k, v in d[key].items()}
        return cls(**d)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --- building reports ------------------------------------------------------------

def _tpot(times: Sequence[int]) -> Optional[float]:
    if len(times) < 2:
        return None
    return (times[-1] - times[0]) / (len(times) - 1)


def _attribute(disable_times: list[int], spans: Mapping[int, tuple[int, int]]) -> dict[int, int]:
    return {rid: bisect.bisect_right(disable_times, end) - bisect.bisect_left(disable_times, start)
            for rid, (start, end) in spans.items()}


def _assemble(meta: dict, arrivals: dict[int, int], emits: dict[int, list[int]],
              done: dict[int, int], busy: dict[str, list[tuple[int, int]]],
              log_counts: dict, reclaim_latencies: list[int], disable_times: list[int],
              delays: list[int]) -> RunReport:
    horizon = meta["horizon_us"]
    gpus = meta["gpus"]
    rep = RunReport(meta["scenario"], meta["preset"], meta["seed"], horizon, gpus)
    rep.arrivals = dict(sorted(arrivals.items()))
    for rid in rep.arrivals:
        times = emits.get(rid, [])
        if times:
            rep.ttft[rid] = times[0] - arrivals[rid]
        tp = _tpot(times)
        if tp is not None:
            rep.tpot[rid] = tp
    rep.online_done = len(done)
    spans = {rid: (a, done.get(rid, horizon)) for rid, a in rep.arrivals.items()}
    rep.attributed_disables = _attribute(disable_times, spans)
    # busy segments are recorded once per node; every GPU of the node shares them
    on_ivs = busy["online"]
    off_ivs = busy["offline"]
    rep.online_busy_us = gpus * sum(e - s for s, e in on_ivs)
    off_gpus = 1 if meta["preset"] == "standalone" else gpus
    rep.offline_busy_us = off_gpus * sum(e - s for s, e in off_ivs)
    if horizon > 0:
        rep.online_util_series = busy_fraction_series(on_ivs, horizon).samples
        rep.offline_util_series = busy_fraction_series(off_ivs, horizon).samples
    rep.offline_tokens = log_counts["offline_tokens"]
    rep.offline_tokens_lost = log_counts["lost"]
    rep.disables = len(disable_times)
    rep.reclaim_latencies = list(reclaim_latencies)
    rep.pressure_events = log_counts["pressure"]
    rep.window_us = meta.get("window_us", 0)
    rep.windows = log_counts["window"]
    rep.kills = log_counts["kill"]
    rep.faults = log_counts["fault"]
    rep.evictions = log_counts["invalidate"]
    rep.max_online_delay_us = max(delays, default=0)
    return rep


def report_from_events(events: Iterable[dict]) -> RunReport:
    """Rebuild a report purely from an event log (list of dicts or JSONL lines)."""
    meta = None
    arrivals: dict[int, int] = {}
    emits: dict[int, list[int]] = {}
    done: dict[int, int] = {}
    busy = {"online": [], "offline": []}
    counts = dict.fromkeys(("offline_tokens", "lost", "pressure", "window", "kill", "fault",
                            "invalidate"), 0)
    latencies, disables, delays = [], [], []
    for e in events:
        if isinstance(e, str):
            if not e.strip():
                continue
            e = json.loads(e)
        ev, t = e["ev"], e["t"]
        if ev == "meta":
            meta = e
        elif ev == "online_arrival":
            arrivals[e["id"]] = t
        elif ev == "online_tokens":
            for rid in e["ids"]:
                emits.setdefault(rid, []).append(t)
        elif ev == "online_done":
            done[e["id"]] = t
        elif ev == "busy":
            busy[e["cls"]].append((e["start"], e["end"]))
        elif ev == "offline_tokens":
            counts["offline_tokens"] += e["n"]
        elif ev == "kill":
            counts["kill"] += 1
            counts["lost"] += e["lost"]
        elif ev == "disable":
            disables.append(t)
        elif ev == "reclaim_done":
            latencies.append(e["latency"])
        elif ev == "online_delay":
            delays.append(e["d"])
        elif ev in counts:
            counts[ev] += 1
    if meta is None:
        raise ValueError("event log has no meta record")
    return _assemble(meta, arrivals, emits, done, busy, counts, latencies, disables, delays)


def report_from_node(node: "NodeSim") -> RunReport:
    """Inline report from simulator state (no log parsing)."""
    meta = {"scenario": node.scenario.name, "preset": node.selection.name, "seed": node.seed,
            "horizon_us": node.horizon_us, "gpus": len(node.gpus),
            "window_us": node.params.window_us}
    reqs = node.online_reqs
    arrivals = {rid: r.arrival for rid, r in reqs.items()}
    emits = {rid: list(r.token_emit_times) for rid, r in reqs.items()}
    done = {rid: r.done_at for rid, r in reqs.items() if r.done_at is not None}
    busy = {"online": list(node.gpus[0].busy_intervals["online"]),
            "offline": list(node.offline_gpus[0].busy_intervals["offline"])}
    tally = node.sim.counts
    counts = {"offline_tokens": node.offline_tokens, "lost": node.offline_tokens_lost,
              "pressure": tally["pressure"], "window": tally["window"], "kill": tally["kill"],
              "fault": node.faults, "invalidate": tally["invalidate"]}
    return _assemble(meta, arrivals, emits, done, busy, counts,
                     list(node.memory.reclaim_latencies), list(node.compute.disable_times),
                     list(node.online_delays))


def dump_events(events: Iterable[dict]) -> str:
    return "".join(json.dumps(e, separators=(",", ":"), sort_keys=True) + "\n" for e in events)


# --- comparison metrics ------------------------------------------------------------

class MismatchedRunsError(ValueError):
    """The two reports do not describe the same online trace."""


def ttft_tpot_increase(colocated: RunReport, standalone: RunReport) -> tuple[float, float]:
    """Percentage increase of mean TTFT and mean TPOT over the standalone run.

    Only requests with a value in both runs are compared.
    """
    if colocated.arrivals != standalone.arrivals:
        raise MismatchedRunsError("runs do not share the same online trace")

    def pct(a: dict, b: dict) -> float:
        ids = sorted(set(a) & set(b))
        if not ids:
            return 0.0
        base = _mean([b[i] for i in ids])
        col = _mean([a[i] for i in ids])
        if base == 0:
            return 0.0 if col == 0 else math.inf
        return (col - base) / base * 100.0

    return pct(colocated.ttft, standalone.ttft), pct(colocated.tpot, standalone.tpot)


class UndefinedRatioError(ZeroDivisionError):
    pass


def normalized_offline_throughput(run: RunReport, reference: RunReport) -> float:
    ref = reference.offline_tokens_per_s
    if ref == 0:
        raise UndefinedRatioError("reference offline throughput is zero")
    return run.offline_tokens_per_s / ref


def utilization_improvement(run: RunReport) -> float:
    """Fraction of GPU time spent on offline compute."""
    if run.horizon_us == 0:
        return 0.0
    gpus = 1 if run.preset == "standalone" else run.gpus
    return run.offline_busy_us / (run.horizon_us * gpus)


def saved_gpus(harvested: Mapping[str, float], standalone: Mapping[str, float]) -> float:
    """GPU-equivalents of offline work done on shared GPUs.

    Both maps go from offline workload id to tokens/s.
    """
    total = 0.0
    for wid in sorted(harvested):
        base = standalone[wid]
        if base <= 0:
            raise UndefinedRatioError(f"standalone throughput of {wid!r} is zero")
        total += harvested[wid] / base
    return total


def csv_row(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writerow(report.summary())
    return buf.getvalue()


def csv_header() -> str:
    return ",".join(CSV_FIELDS) + "\n"
