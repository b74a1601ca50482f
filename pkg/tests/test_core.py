import pytest

from colocsim.core import (CostModel, EventKind, GpuSim, OfflineRequest, OnlineRequest,
                           SimulationError, Simulator)
from colocsim.metrics import dump_events
from colocsim.sim import Scenario, simulate
from oracles import single_request_timeline


def test_schedule_in_past_rejected():
    sim = Simulator()
    seen = []
    sim.on(EventKind.ARRIVAL, lambda ev: (seen.append(ev.payload), sim.at(3, EventKind.ARRIVAL)))
    sim.at(5, EventKind.ARRIVAL, "a")
    with pytest.raises(SimulationError):
        sim.run()
    assert seen == ["a"]


def test_equal_times_dispatch_in_sequence_order():
    sim = Simulator()
    order = []
    sim.on(EventKind.ARRIVAL, lambda ev: order.append(ev.seq))
    e1 = sim.at(7, EventKind.ARRIVAL)
    e2 = sim.at(7, EventKind.ARRIVAL)
    sim.run()
    assert (e1.seq, e2.seq) == (1, 2)
    assert order == [1, 2]


def test_empty_queue_run():
    assert Simulator().run() == 0
    assert Simulator().run(until=100) == 100


def test_run_until_leaves_later_events():
    sim = Simulator()
    hits = []
    sim.on(EventKind.MONITOR_TICK, lambda ev: hits.append(ev.time))
    for t in (10, 20, 30):
        sim.at(t, EventKind.MONITOR_TICK)
    assert sim.run(until=20) == 20
    assert hits == [10, 20]
    assert sim.pending() == 1


def test_cancelled_event_skipped():
    sim = Simulator()
    hits = []
    sim.on(EventKind.MONITOR_TICK, lambda ev: hits.append(ev.payload))
    ev = sim.at(5, EventKind.MONITOR_TICK, "x")
    sim.at(6, EventKind.MONITOR_TICK, "y")
    sim.cancel(ev)
    sim.run()
    assert hits == ["y"]


def test_missing_handler_is_a_bug():
    sim = Simulator()
    sim.at(1, EventKind.ARRIVAL)
    with pytest.raises(SimulationError):
        sim.run()


def test_online_request_emit_invariants():
    r = OnlineRequest(1, arrival=0, prompt_tokens=4, output_tokens=2)
    r.emit(10)
    with pytest.raises(SimulationError):
        r.emit(10)
    r.emit(11)
    assert r.finished and r.first_token_at == 10
    with pytest.raises(SimulationError):
        r.emit(12)


def test_offline_cost_counts_generated_tokens():
    r = OfflineRequest(1, input_tokens=100, output_tokens=10, generated_tokens=3)
    assert r.cost == 103
    assert r.kv_tokens == 110


def test_gpu_busy_intervals_must_not_overlap():
    g = GpuSim(0)
    g.add_busy("online", 0, 10)
    g.add_busy("offline", 5, 8)  # different class, allowed here
    with pytest.raises(SimulationError):
        g.add_busy("online", 9, 12)
    assert g.busy_time("online") == 10


def test_cost_model_defaults():
    c = CostModel()
    assert c.prefill(200) == 2000
    assert c.decode() == 2000


def _single(arrival, prompt, output, gaps):
    return Scenario.from_dict({
        "name": "one", "horizon_us": 1_000_000, "preset": "valve",
        "online": [{"records": [{"arrival_us": arrival, "prompt_tokens": prompt,
                                 "output_tokens": output}]}],
        "params": {"decode_gap": {"schedule": gaps}},
    })


def test_single_prefill_finishes_at_12ms():
    # arrival at 10 ms, one 2000 µs prefill that also emits the only token
    node = simulate(_single(10_000, 200, 1, [0]))
    req = node.online_reqs[0]
    assert req.done_at == 12_000
    assert req.token_emit_times == [12_000]


def test_decode_timeline_matches_hand_trace():
    node = simulate(_single(10_000, 200, 5, [100, 300]))
    assert node.online_reqs[0].token_emit_times == single_request_timeline(
        10_000, 200, 5, [100, 300])


def test_same_seed_identical_event_log():
    sc = Scenario.load(_suite("spike-chat"))
    sc.horizon_us = 3_000_000
    a = dump_events(simulate(sc, "valve").sim.log)
    b = dump_events(simulate(sc, "valve").sim.log)
    assert a == b


def test_busy_time_never_exceeds_elapsed():
    sc = Scenario.load(_suite("batch-heavy"))
    sc.horizon_us = 4_000_000
    for preset in ("valve", "gpreempt+uvm", "channel+static"):
        node = simulate(sc, preset)
        for g in node.gpus:
            total = g.busy_time("online") + g.busy_time("offline")
            assert total <= node.horizon_us


def _suite(name):
    from importlib import resources
    return resources.files("colocsim") / "scenarios" / "suite" / f"{name}.json"
