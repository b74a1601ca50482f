import pytest

from colocsim.metrics import (MismatchedRunsError, RunReport, UndefinedRatioError, csv_header,
                              csv_row, dump_events, normalized_offline_throughput, percentile,
                              report_from_events, report_from_node, saved_gpus,
                              ttft_tpot_increase, utilization_improvement)
from colocsim.sim import Scenario, simulate
from test_core import _suite


def report(**kw):
    base = dict(scenario="s", preset="valve", seed=0, horizon_us=1_000_000, gpus=1)
    base.update(kw)
    return RunReport(**base)


def test_identical_runs_no_increase():
    r = report(arrivals={1: 0}, ttft={1: 100}, tpot={1: 20.0})
    assert ttft_tpot_increase(r, r) == (0.0, 0.0)


def test_ttft_increase_arithmetic():
    alone = report(arrivals={1: 0}, ttft={1: 100_000}, tpot={1: 10.0})
    col = report(arrivals={1: 0}, ttft={1: 104_000}, tpot={1: 10.0})
    ttft, tpot = ttft_tpot_increase(col, alone)
    assert ttft == pytest.approx(4.0) and tpot == 0.0


def test_tpot_only_counts_multi_token_requests():
    alone = report(arrivals={1: 0, 2: 0}, ttft={1: 10, 2: 10}, tpot={1: 100.0})
    col = report(arrivals={1: 0, 2: 0}, ttft={1: 10, 2: 10}, tpot={1: 150.0})
    assert ttft_tpot_increase(col, alone)[1] == pytest.approx(50.0)


def test_mismatched_traces_rejected():
    with pytest.raises(MismatchedRunsError):
        ttft_tpot_increase(report(arrivals={1: 0}), report(arrivals={1: 5}))


def test_normalized_throughput():
    ref = report(offline_tokens=500)
    assert normalized_offline_throughput(ref, ref) == 1.0
    assert normalized_offline_throughput(report(), ref) == 0.0
    with pytest.raises(UndefinedRatioError):
        normalized_offline_throughput(ref, report())


def test_killed_tokens_do_not_count():
    r = report(offline_tokens=500, offline_tokens_lost=200)
    assert r.offline_tokens_per_s == 300.0


def test_saved_gpus():
    assert saved_gpus({"a": 10.0}, {"a": 10.0}) == 1.0
    assert saved_gpus({"a": 5.0, "b": 2.0}, {"a": 10.0, "b": 4.0}) == 1.0
    with pytest.raises(UndefinedRatioError):
        saved_gpus({"a": 1.0}, {"a": 0.0})


def test_utilization_edges():
    assert utilization_improvement(report()) == 0.0
    assert utilization_improvement(report(online_busy_us=1_000_000)) == 0.0
    assert utilization_improvement(report(horizon_us=0)) == 0.0


def test_utilization_half_duty_online():
    period, T_cool, toggle = 100_000, 600, 1000
    sc = Scenario.from_dict({
        "name": "duty", "horizon_us": 2_000_000,
        "online": [{"records": [{"arrival_us": i * period, "prompt_tokens": 5000,
                                 "output_tokens": 1} for i in range(20)]}],
        "offline": {"pattern": "batch", "batch_size": 200, "batch_period_us": 10**9,
                    "prompt_tokens": [2000, 2000], "output_tokens": [400, 400]},
        "params": {"decode_gap": {"schedule": [300]}},
    })
    node = simulate(sc)
    assert node.cooldown.T_cool == T_cool
    u = report_from_node(node).utilization
    assert 0.5 - (T_cool + toggle) / period <= u <= 0.5


def test_percentile_nearest_rank():
    assert percentile([], 50) == 0.0
    assert percentile([5, 1, 3, 2, 4], 50) == 3.0
    assert percentile(list(range(1, 101)), 99) == 99.0


def test_report_from_log_equals_inline():
    sc = Scenario.load(_suite("batch-mixed"))
    sc.horizon_us = 4_000_000
    for preset in ("valve", "gpreempt+uvm", "channel+static", "standalone"):
        node = simulate(sc, preset)
        inline = report_from_node(node)
        replayed = report_from_events(node.sim.log)
        assert inline.to_json() == replayed.to_json()


def test_report_json_round_trip(tmp_path):
    sc = Scenario.load(_suite("spike-chat"))
    sc.horizon_us = 2_000_000
    r = report_from_node(simulate(sc))
    p = tmp_path / "r.json"
    p.write_text(r.to_json())
    assert RunReport.load(p) == r


def test_csv_row_has_every_column():
    r = report(arrivals={1: 0}, ttft={1: 5})
    header = csv_header().strip().split(",")
    row = csv_row(r).strip().split(",")
    assert len(header) == len(row)


def test_event_dump_is_sorted_and_compact():
    line = dump_events([{"t": 1, "ev": "x", "b": 2, "a": 1}])
    assert line == '{"a":1,"b":2,"ev":"x","t":1}\n'
