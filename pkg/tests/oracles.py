"""Slow, obviously-correct reference computations used to freeze expected values.

Nothing here imports the package under test.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction


def brute_force_eviction(reqs: dict, k: int, cost: dict) -> tuple[tuple, int]:
    """Cheapest k-subset of handles by full enumeration (lexicographic ties)."""
    best = None
    for combo in itertools.combinations(sorted(reqs), k):
        hit = set()
        for h in combo:
            hit |= set(reqs[h])
        c = sum(cost[r] for r in hit)
        if best is None or c < best[1]:
            best = (combo, c)
    return best


def overlap_ratio_on_grid(a: list, b: list) -> Fraction:
    """Busy-time intersection over union by marking every integer instant."""
    sa = {t for s, e in a for t in range(s, e)}
    sb = {t for s, e in b for t in range(s, e)}
    union = sa | sb
    if not union:
        return Fraction(1)
    return Fraction(len(sa & sb), len(union))


def population_cv(xs: list) -> Fraction:
    """CV with exact rationals; only valid when the variance is a perfect square."""
    n = len(xs)
    mean = Fraction(sum(xs), n)
    var = sum((Fraction(x) - mean) ** 2 for x in xs) / n
    root = Fraction(math.isqrt(var.numerator), math.isqrt(var.denominator))
    assert root * root == var, "variance is not a perfect square"
    return root / mean


def linear_memory_factor(trace: list, m_max: float, m_req: float, mac: float) -> Fraction:
    """Memory factor for the identity curve Thrput(M) = M, capped at m_max."""
    thr = [min(Fraction(m), Fraction(m_max)) for m in trace]
    deficit = [max(Fraction(0), Fraction(m_req) - Fraction(m)) for m in trace]
    num = sum(thr) / len(thr) - Fraction(mac) * sum(deficit) / len(deficit)
    return min(Fraction(1), max(Fraction(0), num / Fraction(m_max)))


def single_request_timeline(arrival_us: int, prompt: int, outputs: int, gaps: list,
                            c_p: int = 10, c_d: int = 2000) -> list[int]:
    """Token emission times for one request alone on an idle GPU.

    One prefill emits the first token; each following decode step emits one
    more.  ``gaps`` is the host gap injected after every iteration, cycled.
    """
    times = []
    t = arrival_us + c_p * prompt
    times.append(t)
    i = 0
    while len(times) < outputs:
        t += gaps[i % len(gaps)] + c_d
        i += 1
        times.append(t)
    return times


def reclaim_latency(toggle_us: int, k: int, remap_us: int) -> int:
    return toggle_us + k * remap_us


def boundary_reclaim_latency(prefill_tokens: int, elapsed_us: int, k: int, remap_us: int,
                             c_p: int = 10) -> int:
    """Wait for the in-flight prefill to finish, then remap."""
    return c_p * prefill_tokens - elapsed_us + k * remap_us
