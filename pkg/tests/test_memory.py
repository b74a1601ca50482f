import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from colocsim.memory import (HandleState, MemoryPool, QUARANTINE_PAGE, ReservationController,
                             eviction_cost, fifo_reclaim, marginal_costs, oracle_reclaim,
                             reservation_tick, selective_reclaim)
from colocsim.sim import NodeSim, Scenario, simulate
from oracles import brute_force_eviction, reclaim_latency

REQS = {"h1": {"r1"}, "h2": {"r2"}, "h3": {"r1", "r2"}}
COST = {"r1": 10, "r2": 4}


def test_greedy_picks_cheapest_single_handle():
    assert selective_reclaim(REQS, 1, COST) == ["h2"]
    assert brute_force_eviction(REQS, 1, COST) == (("h2",), 4)


def test_marginal_costs_drop_to_zero_after_covering_handle():
    assert marginal_costs(REQS, COST, selected={"h3"}) == {"h1": 0, "h2": 0}
    # the id tie-break then takes h1
    assert min(sorted(marginal_costs(REQS, COST, {"h3"}).items()), key=lambda kv: kv[1])[0] == "h1"


def test_greedy_all_handles():
    assert sorted(selective_reclaim(REQS, 3, COST)) == ["h1", "h2", "h3"]
    assert selective_reclaim(REQS, 0, COST) == []
    with pytest.raises(ValueError):
        selective_reclaim(REQS, 4, COST)


def test_fifo_examples():
    assert fifo_reclaim({"h1": 5, "h2": 3}, 1) == ["h2"]
    assert fifo_reclaim({"h1": 5, "h2": 3}, 0) == []


def test_fifo_worse_than_greedy_when_oldest_is_crowded():
    reqs = {0: {"a", "b", "c"}, 1: {"d"}, 2: {"e"}}
    cost = dict.fromkeys("abcde", 10)
    fifo = fifo_reclaim({0: 0, 1: 5, 2: 9}, 1)
    assert eviction_cost(reqs, fifo, cost) == 30
    assert eviction_cost(reqs, selective_reclaim(reqs, 1, cost), cost) == 10


def test_oracle_on_shared_instance():
    # every 2-subset costs 14; lexicographic tie-break gives h1, h2
    picked, cost = oracle_reclaim(REQS, 2, COST)
    assert cost == 14 == brute_force_eviction(REQS, 2, COST)[1]
    assert picked == ["h1", "h2"]
    greedy = selective_reclaim(REQS, 2, COST)
    assert eviction_cost(REQS, greedy, COST) == 14


def test_oracle_all_handles_costs_everything():
    assert oracle_reclaim(REQS, 3, COST)[1] == 14


def test_oracle_size_limit():
    with pytest.raises(ValueError):
        oracle_reclaim({i: set() for i in range(21)}, 1, {})


@given(st.lists(st.integers(1, 100), min_size=1, max_size=10), st.data())
@settings(max_examples=100, deadline=None)
def test_greedy_matches_oracle_when_disjoint(costs, data):
    reqs = {i: {f"r{i}"} for i in range(len(costs))}
    cost = {f"r{i}": c for i, c in enumerate(costs)}
    k = data.draw(st.integers(0, len(costs)))
    g = eviction_cost(reqs, selective_reclaim(reqs, k, cost), cost)
    assert g == brute_force_eviction(reqs, k, cost)[1]


def test_pool_conservation_and_quarantine():
    pool = MemoryPool(4, handle_pages=4, page_tokens=16)
    assert pool.reserve_free(1) == 1
    pool.map_offline(0)
    pages = pool.alloc_pages(7, 3)
    pool.check_conservation()
    report = pool.remap_to_quarantine([1])
    assert report == {7: pages}
    h = pool.handles[1]
    assert h.state is HandleState.ONLINE_RESERVED
    assert h.slots == [QUARANTINE_PAGE] * 4 and not h.resident_requests()
    assert pool.free_pages == type(pool.free_pages)()
    pool.check_conservation()
    assert pool.counts() == {"free": 2, "online_reserved": 2, "offline_mapped": 0}


def test_release_reserved_keeps_in_use():
    pool = MemoryPool(4)
    pool.reserve_free(3)
    pool.online_in_use = 2
    assert pool.release_reserved(5) == 1


def test_miad_examples():
    c = ReservationController(H=10, alpha=1.5)
    assert c.on_pressure(0) == 15
    for i in range(3):
        reservation_tick(c, (i + 1) * c.T)
    assert c.H == 12
    c = ReservationController(T=1_000_000, window=60_000_000, target_rate=1, beta=2,
                              T_max=10**9)
    c.pressure_log = [1, 2]
    assert c.on_window(60_000_000) == 2_000_000


def test_miad_bounds():
    c = ReservationController(H=3, H_max=4, H_min=2, T=200, delta=150, T_min=100)
    assert c.on_pressure(0) == 4
    for _ in range(5):
        c.on_quiet_interval(0)
    assert c.H == 2
    assert c.on_window(10**9) == 100
    with pytest.raises(ValueError):
        ReservationController(alpha=1.0)


# --- end-to-end reclamation --------------------------------------------------

def reclaim_scenario(prefill_tokens, preset="valve", horizon_us=2_000_000, **params):
    pages = math.ceil((prefill_tokens + 1) / 16)
    p = {"total_handles": 1 + math.ceil(pages / 64), "H_init": 1}
    p.update(params)
    return Scenario.from_dict({
        "name": "reclaim", "horizon_us": horizon_us, "preset": preset,
        "online": [{"records": [{"arrival_us": 100, "prompt_tokens": 1500,
                                 "output_tokens": 4}]}],
        "offline": [{"records": [{"arrival_us": 0, "prompt_tokens": prefill_tokens,
                                  "output_tokens": 1}]}],
        "params": p,
    })


def _log(node, kind):
    return [e for e in node.sim.log if e["ev"] == kind]


def test_pressure_at_ninety_percent():
    node = simulate(reclaim_scenario(1024))
    (p, *_) = _log(node, "pressure")
    assert p["in_use"] >= 0.9 * p["held"]


@pytest.mark.parametrize("L", [1024, 8192, 32768])
def test_reclaim_latency_is_toggle_plus_remap(L):
    node = simulate(reclaim_scenario(L))
    first = _log(node, "reclaim_done")[0]
    assert first["latency"] == reclaim_latency(1000, first["k"], 50)
    assert node.faults == 0


def test_invalidation_lists_offline_pages():
    node = simulate(reclaim_scenario(8192))
    (inv,) = _log(node, "invalidate")
    done = next(e for e in _log(node, "reclaim_done") if e["requests"])
    assert inv["request_id"] == 0 and inv["cost"] == 8192
    # exactly the slots of the reclaimed handles
    expect = [h * 64 + s for h in done["handles"] for s in range(64)]
    assert inv["invalidated_page_ids"] == expect


def test_memory_before_compute_faults():
    node = simulate(reclaim_scenario(8192, reclaim_order="memory_first"))
    assert node.faults >= 1
    assert _log(node, "fault")


def test_eviction_is_lossless():
    # headroom drains one handle per second, so leave room to re-admit
    evicted = simulate(reclaim_scenario(8192, horizon_us=20_000_000))
    alone = simulate(reclaim_scenario(8192, horizon_us=20_000_000), "standalone")
    assert _log(evicted, "invalidate")
    a, b = evicted.offline_reqs[0], alone.offline_reqs[0]
    assert a.generated_tokens == b.generated_tokens == 1
    assert a.state == b.state


def test_handle_conservation_through_run():
    sc = reclaim_scenario(8192)
    node = NodeSim(sc, "valve")
    pool = node.memory.pool
    record = node.sim.record

    def checked(ev, **kw):
        pool.check_conservation()
        return record(ev, **kw)

    node.sim.record = checked
    node.run()
    pool.check_conservation()


def test_reclaim_zero_is_empty():
    node = NodeSim(reclaim_scenario(1024), "valve")
    assert node.memory.reclaim_handles(0, 0, "greedy") == ([], {})


def test_random_step_invariant():
    rng = random.Random(11)
    for _ in range(200):
        n = rng.randint(1, 8)
        reqs = {h: {rng.randrange(10) for _ in range(rng.randint(0, 3))} for h in range(n)}
        cost = {r: rng.randint(1, 50) for r in range(10)}
        k = rng.randint(0, n)
        picked = selective_reclaim(reqs, k, cost)
        for i, h in enumerate(picked):
            m = marginal_costs(reqs, cost, picked[:i])
            assert m[h] == min(m.values())
