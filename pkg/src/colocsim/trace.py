"""Workload traces: JSON-Lines I/O, synthetic burst generators, burstiness stats."""

from __future__ import annotations

import bisect
import json
import math
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

TRACE_FIELDS = ("arrival_us", "class", "prompt_tokens", "output_tokens", "stream_id")
REQUEST_CLASSES = ("online", "offline")
PATTERNS = ("poisson", "spike", "batch")


class TraceFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ZeroMeanError(ArithmeticError):
    """CV is undefined for a series whose mean is zero."""


@dataclass(frozen=True, order=True)
class TraceRecord:
    arrival_us: int
    request_class: str = "online"
    prompt_tokens: int = 1
    output_tokens: int = 1
    stream_id: str = "s0"

    def __post_init__(self):
        if self.arrival_us < 0:
            raise ValueError("arrival_us must be non-negative")
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise ValueError("token counts must be >= 1")
        if self.request_class not in REQUEST_CLASSES:
            raise ValueError(f"unknown request class {self.request_class!r}")

    def to_json(self) -> dict:
        return {
            "arrival_us": self.arrival_us,
            "class": self.request_class,
            "prompt_tokens": self.prompt_tokens,
            "output_tokens": self.output_tokens,
            "stream_id": self.stream_id,
        }


def _parse_record(obj, lineno: int) -> TraceRecord:
    if not isinstance(obj, dict):
        raise TraceFormatError(lineno, "expected a JSON object")
    missing = [k for k in TRACE_FIELDS if k not in obj]
    if missing:
        raise TraceFormatError(lineno, f"missing field {missing[0]!r}")
    extra = sorted(set(obj) - set(TRACE_FIELDS))
    if extra:
        raise TraceFormatError(lineno, f"unexpected field {extra[0]!r}")
    for key in ("arrival_us", "prompt_tokens", "output_tokens"):
        v = obj[key]
        if isinstance(v, bool) or not isinstance(v, int):
            raise TraceFormatError(lineno, f"field {key!r} must be an integer")
    if obj["class"] not in REQUEST_CLASSES:
        raise TraceFormatError(lineno, f"field 'class' must be one of {REQUEST_CLASSES}")
    if not isinstance(obj["stream_id"], str):
        raise TraceFormatError(lineno, "field 'stream_id' must be a string")
    try:
        return TraceRecord(obj["arrival_us"], obj["class"], obj["prompt_tokens"],
                           obj["output_tokens"], obj["stream_id"])
    except ValueError as exc:
        raise TraceFormatError(lineno, str(exc)) from None


def load_trace(path: Union[str, Path]) -> list[TraceRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(lineno, f"invalid JSON ({exc.msg})") from None
            records.append(_parse_record(obj, lineno))
    # stable: equal arrivals keep file order
    records.sort(key=lambda r: r.arrival_us)
    return records


def dump_trace(records: Iterable[TraceRecord]) -> str:
    return "".join(json.dumps(r.to_json(), separators=(",", ":")) + "\n" for r in records)


def save_trace(records: Iterable[TraceRecord], path: Union[str, Path]) -> None:
    Path(path).write_text(dump_trace(records), encoding="utf-8")


TokenSpec = Union[int, Sequence[int]]


@dataclass
class GenSpec:
    """Parameters for :func:`gen_trace`.

    Rates are arrivals per second; periods and widths are microseconds.
    Token counts are either a fixed int or an inclusive ``[lo, hi]`` range.
    """

    pattern: str = "poisson"
    horizon_us: int = 1_000_000
    rate: float = 0.0
    base_rate: float = 0.0
    spike_rate: float = 0.0
    spike_period_us: int = 1_000_000
    spike_width_us: int = 100_000
    batch_size: int = 1
    batch_period_us: int = 1_000_000
    request_class: str = "online"
    prompt_tokens: TokenSpec = 512
    output_tokens: TokenSpec = 64
    stream_id: str = "s0"

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        d = dict(d)
        if "class" in d:
            d["request_class"] = d.pop("class")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown generator parameter {unknown[0]!r}")
        return cls(**d)

    def validate(self) -> None:
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.horizon_us < 0:
            raise ValueError("horizon_us must be non-negative")
        if self.pattern == "poisson" and self.rate < 0:
            raise ValueError("poisson rate must be >= 0")
        if self.pattern == "spike":
            if self.base_rate < 0 or self.spike_rate < 0:
                raise ValueError("spike rates must be >= 0")
            if self.spike_period_us <= 0 or self.spike_width_us <= 0:
                raise ValueError("spike period and width must be positive")
            if self.spike_width_us > self.spike_period_us:
                raise ValueError("spike width exceeds period")
        if self.pattern == "batch":
            if self.batch_size <= 0 or self.batch_period_us <= 0:
                raise ValueError("batch size and period must be positive")
        for name in ("prompt_tokens", "output_tokens"):
            lo, hi = _token_range(getattr(self, name))
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be >= 1 with lo <= hi")


def _token_range(spec: TokenSpec) -> tuple[int, int]:
    if isinstance(spec, int):
        return spec, spec
    lo, hi = spec
    return int(lo), int(hi)


def _draw_tokens(rng: random.Random, spec: TokenSpec) -> int:
    lo, hi = _token_range(spec)
    return lo if lo == hi else rng.randint(lo, hi)


def _poisson_times(rng: random.Random, rate_per_s: float, start: int, end: int) -> list[int]:
    if rate_per_s <= 0 or end <= start:
        return []
    lam = rate_per_s / 1e6
    out = []
    t = float(start)
    while True:
        t += rng.expovariate(lam)
        ti = int(t)
        if ti >= end:
            return out
        out.append(ti)


def gen_trace(spec: Union[GenSpec, dict], seed: int) -> list[TraceRecord]:
    if isinstance(spec, dict):
        spec = GenSpec.from_dict(spec)
    spec.validate()
    rng = random.Random(f"gen:{seed}:{spec.stream_id}:{spec.request_class}")
    horizon = spec.horizon_us
    if spec.pattern == "poisson":
        times = _poisson_times(rng, spec.rate, 0, horizon)
    elif spec.pattern == "spike":
        times = []
        period, width = spec.spike_period_us, spec.spike_width_us
        for p0 in range(0, horizon, period):
            # exponential gaps are memoryless, so restarting at each boundary is exact
            times += _poisson_times(rng, spec.spike_rate, p0, min(p0 + width, horizon))
            times += _poisson_times(rng, spec.base_rate, p0 + width, min(p0 + period, horizon))
    else:
        times = [t for t in range(0, horizon, spec.batch_period_us)
                 for _ in range(spec.batch_size)]
    return [TraceRecord(t, spec.request_class, _draw_tokens(rng, spec.prompt_tokens),
                        _draw_tokens(rng, spec.output_tokens), spec.stream_id)
            for t in times]


@dataclass
class UtilizationSeries:
    period_us: int = 100_000
    samples: list[float] = field(default_factory=list)

    def __post_init__(self):
        for s in self.samples:
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"utilization sample {s} outside [0, 1]")


def coefficient_of_variation(series: Union[UtilizationSeries, Sequence[float]]) -> float:
    samples = series.samples if isinstance(series, UtilizationSeries) else list(series)
    if not samples:
        raise ValueError("coefficient of variation of an empty series")
    mean = statistics.fmean(samples)
    if mean == 0:
        raise ZeroMeanError("series mean is zero")
    return statistics.pstdev(samples, mu=mean) / mean


def arrival_count_series(records: Sequence[TraceRecord], bin_us: int, horizon_us: int) -> list[int]:
    counts = [0] * max(1, math.ceil(horizon_us / bin_us))
    for r in records:
        if r.arrival_us < horizon_us:
            counts[r.arrival_us // bin_us] += 1
    return counts


def busy_fraction_series(intervals: Sequence[tuple[int, int]], horizon_us: int,
                         period_us: int = 100_000) -> UtilizationSeries:
    """Per-period fraction of time covered by (non-overlapping) busy intervals."""
    n = max(1, math.ceil(horizon_us / period_us)) if horizon_us > 0 else 0
    busy = [0] * n
    for s, e in intervals:
        e = min(e, horizon_us)
        while s < e:
            b = s // period_us
            edge = min(e, (b + 1) * period_us)
            busy[b] += edge - s
            s = edge
    samples = []
    for b in range(n):
        width = min(period_us, horizon_us - b * period_us)
        samples.append(min(1.0, busy[b] / width))
    return UtilizationSeries(period_us, samples)


@dataclass
class GapDistribution:
    gaps_us: list[int] = field(default_factory=list)

    @property
    def max_gap(self) -> int:
        return max(self.gaps_us, default=0)

    def cdf(self) -> list[tuple[int, float]]:
        xs = sorted(self.gaps_us)
        n = len(xs)
        return [(x, (i + 1) / n) for i, x in enumerate(xs)]


def measure_gaps(online_busy: Sequence[tuple[int, int]],
                 decode_spans: Sequence[tuple[int, Optional[int]]]) -> GapDistribution:
    """Idle stretches between online kernels while some request is mid-decode.

    ``online_busy`` are the online kernel intervals of one GPU; ``decode_spans``
    are per-request ``(first_token_at, done_at)`` pairs (``done_at`` None if the
    request never finished).  A gap between two consecutive kernels counts
    when at least one request has emitted its first token but not finished at
    the moment the earlier kernel ends.
    """
    ivs = sorted(online_busy)
    if len(ivs) < 2 or not decode_spans:
        return GapDistribution([])
    firsts = sorted(f for f, _ in decode_spans)
    dones = sorted(d for _, d in decode_spans if d is not None)
    gaps = []
    for (s0, e0), (s1, e1) in zip(ivs, ivs[1:]):
        started = bisect.bisect_right(firsts, e0)
        finished = bisect.bisect_right(dones, e0)
        if started - finished > 0:
            gaps.append(s1 - e0)
    return GapDistribution(gaps)
