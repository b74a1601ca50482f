import pytest

from colocsim.baselines import PRESETS, PolicySelection
from colocsim.sim import simulate
from test_memory import _log, reclaim_scenario

PREFILL = 1500 * 10  # the online prompt of reclaim_scenario
OFFLINE = 8192 * 10


def run(preset):
    return simulate(reclaim_scenario(8192, horizon_us=20_000_000), preset)


def test_preset_table():
    assert PolicySelection.parse("valve") == PolicySelection("channel", "our_mem")
    assert PolicySelection.parse("gpreempt+uvm").name == "gpreempt+uvm"
    assert PolicySelection.parse("kernel_preempt+uvm").name == "kernel+uvm"
    assert PolicySelection.parse("standalone").name == "standalone"
    assert len(PRESETS) == 6


def test_unknown_preset_lists_valid_ones():
    with pytest.raises(ValueError) as exc:
        PolicySelection.parse("turbo")
    for name in PRESETS:
        assert name in str(exc.value)


def test_kernel_preempt_waits_for_iteration_boundary():
    node = run("kernel+uvm")
    # offline prefill started at 0, online arrives at 100
    assert node.online_delays == [OFFLINE - 100]
    assert node.online_reqs[0].first_token_at == OFFLINE + 64 * 100 + PREFILL


def test_gpreempt_preempts_within_timeslice():
    node = run("gpreempt+uvm")
    assert node.online_delays[0] == 500
    assert node.online_reqs[0].first_token_at == 100 + 500 + 64 * 100 + PREFILL


def test_gpreempt_lets_offline_into_decode_gaps():
    node = run("gpreempt+uvm")
    assert len(node.online_delays) > 1
    assert len(run("channel+uvm").online_delays) == 1


def test_uvm_stall_is_charged_to_online_prefill():
    node = run("channel+uvm")
    (done,) = _log(node, "reclaim_done")
    assert done["latency"] == 64 * 100
    assert node.online_reqs[0].first_token_at == 100 + 1000 + 6400 + PREFILL


def test_prism_online_waits_for_offline_to_finish():
    node = run("channel+prism")
    assert not _log(node, "reclaim_done")
    assert len(_log(node, "pressure")) == 1
    assert node.online_reqs[0].first_token_at == OFFLINE + PREFILL


def test_static_limit_from_calibration():
    node = run("channel+static")
    (lim,) = _log(node, "static_limit")
    assert lim["t"] == 2_000_000 and lim["peak"] == 2 and lim["limit"] == 8
    # the 9-handle offline request never fits under the cap
    assert node.offline_tokens == 0


def test_static_kills_offline_on_shortfall():
    sc = reclaim_scenario(8192, horizon_us=20_000_000, static_calibration_fraction=0.0)
    sc.online[0]["records"][0]["arrival_us"] = 5000
    node = simulate(sc, "channel+static")
    (kill,) = _log(node, "kill")
    assert kill["requests"] == 1 and kill["lost"] == 0
    assert node.faults == 0


def test_standalone_has_no_interference():
    node = run("standalone")
    assert node.online_delays == []
    assert node.online_reqs[0].first_token_at == 100 + PREFILL
    assert node.offline_reqs[0].generated_tokens == 1
