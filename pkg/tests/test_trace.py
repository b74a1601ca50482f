import json

import pytest
from hypothesis import given, settings, strategies as st

from colocsim.trace import (GenSpec, TraceFormatError, TraceRecord, UtilizationSeries,
                            ZeroMeanError, arrival_count_series, busy_fraction_series,
                            coefficient_of_variation, dump_trace, gen_trace, load_trace,
                            measure_gaps, save_trace)
from oracles import population_cv


def _line(**over):
    rec = {"arrival_us": 5, "class": "online", "prompt_tokens": 10, "output_tokens": 2,
           "stream_id": "s"}
    rec.update(over)
    return json.dumps(rec)


def test_load_empty_file(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text("")
    assert load_trace(p) == []


def test_load_sorts_out_of_order_lines(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(_line(arrival_us=9) + "\n" + _line(arrival_us=3) + "\n")
    recs = load_trace(p)
    assert [r.arrival_us for r in recs] == [3, 9]


def test_load_sort_is_stable(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text(_line(stream_id="a") + "\n" + _line(stream_id="b") + "\n")
    assert [r.stream_id for r in load_trace(p)] == ["a", "b"]


def test_missing_field_names_line(tmp_path):
    rec = json.loads(_line())
    del rec["prompt_tokens"]
    p = tmp_path / "t.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    with pytest.raises(TraceFormatError) as exc:
        load_trace(p)
    assert exc.value.line == 1
    assert "prompt_tokens" in str(exc.value)


@pytest.mark.parametrize("bad", [
    {"arrival_us": "5"}, {"arrival_us": True}, {"class": "batch"}, {"prompt_tokens": 0},
    {"extra": 1}, {"arrival_us": -1},
])
def test_bad_fields_rejected_with_line_number(tmp_path, bad):
    p = tmp_path / "t.jsonl"
    p.write_text(_line() + "\n" + _line(**bad) + "\n")
    with pytest.raises(TraceFormatError) as exc:
        load_trace(p)
    assert exc.value.line == 2


def test_invalid_json_rejected(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(TraceFormatError):
        load_trace(p)


records = st.builds(TraceRecord, st.integers(0, 10**9), st.sampled_from(["online", "offline"]),
                    st.integers(1, 10**6), st.integers(1, 10**5),
                    st.text(min_size=0, max_size=8))


@given(st.lists(records, max_size=20))
@settings(max_examples=50, deadline=None)
def test_save_load_round_trip(tmp_path_factory, recs):
    p = tmp_path_factory.mktemp("rt") / "t.jsonl"
    recs = sorted(recs, key=lambda r: r.arrival_us)
    save_trace(recs, p)
    assert load_trace(p) == recs


def test_batch_pattern_shape():
    recs = gen_trace({"pattern": "batch", "batch_size": 4, "batch_period_us": 1000,
                      "horizon_us": 2000}, seed=0)
    assert len(recs) == 8
    assert sorted({r.arrival_us for r in recs}) == [0, 1000]
    assert sum(r.arrival_us == 0 for r in recs) == 4


def test_poisson_rate_zero_is_empty():
    assert gen_trace({"pattern": "poisson", "rate": 0, "horizon_us": 10**7}, seed=1) == []


def test_empty_horizon_is_empty():
    assert gen_trace({"pattern": "batch", "horizon_us": 0}, seed=1) == []


@pytest.mark.parametrize("spec", [
    {"pattern": "poisson", "rate": -1},
    {"pattern": "spike", "spike_period_us": 0},
    {"pattern": "spike", "spike_width_us": -5},
    {"pattern": "batch", "batch_period_us": 0},
    {"pattern": "batch", "batch_size": 0},
    {"pattern": "zigzag"},
])
def test_non_positive_parameters_rejected(spec):
    with pytest.raises(ValueError):
        gen_trace(spec, seed=0)


def test_unknown_generator_key_rejected():
    with pytest.raises(ValueError, match="rte"):
        GenSpec.from_dict({"pattern": "poisson", "rte": 3})


def test_generator_is_deterministic():
    spec = {"pattern": "spike", "base_rate": 5, "spike_rate": 50, "spike_period_us": 10**6,
            "spike_width_us": 10**5, "horizon_us": 5 * 10**6, "prompt_tokens": [10, 100]}
    assert dump_trace(gen_trace(spec, 3)) == dump_trace(gen_trace(spec, 3))
    assert dump_trace(gen_trace(spec, 3)) != dump_trace(gen_trace(spec, 4))


def test_spike_is_burstier_than_poisson():
    # with 1 ms bins, per-bin Poisson noise swamps the spikes below ~235 arrivals/s
    horizon = 5_000_000
    base = 1000.0
    spike = gen_trace({"pattern": "spike", "base_rate": base, "spike_rate": 10 * base,
                       "spike_period_us": 100_000, "spike_width_us": 10_000,
                       "horizon_us": horizon}, seed=5)
    flat = gen_trace({"pattern": "poisson", "rate": base, "horizon_us": horizon}, seed=5)
    cv_spike = coefficient_of_variation(arrival_count_series(spike, 1000, horizon))
    cv_flat = coefficient_of_variation(arrival_count_series(flat, 1000, horizon))
    assert cv_spike > cv_flat


def test_poisson_mean_rate():
    recs = gen_trace({"pattern": "poisson", "rate": 100, "horizon_us": 100_000_000}, seed=2)
    assert abs(len(recs) - 10_000) < 4 * 100  # 4 sigma


def test_cv_examples():
    assert coefficient_of_variation([0.5, 0.5, 0.5]) == 0.0
    assert coefficient_of_variation([0, 2]) == float(population_cv([0, 2])) == 1.0
    with pytest.raises(ValueError):
        coefficient_of_variation([])
    with pytest.raises(ZeroMeanError):
        coefficient_of_variation([0, 0])


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=30), st.floats(0.01, 1.0))
def test_cv_scale_invariant(xs, k):
    a = coefficient_of_variation(xs)
    b = coefficient_of_variation([x * k for x in xs])
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


def test_utilization_samples_must_be_fractions():
    with pytest.raises(ValueError):
        UtilizationSeries(100, [0.5, 1.2])


def test_busy_fraction_series():
    s = busy_fraction_series([(0, 50), (150, 250)], horizon_us=300, period_us=100)
    assert s.samples == [0.5, 0.5, 0.5]


def test_gaps_back_to_back_is_zero():
    g = measure_gaps([(0, 10), (10, 20)], [(10, None)])
    assert g.max_gap == 0


def test_gaps_single_request_schedule():
    # prefill [0,100) then decodes separated by 100 µs and 300 µs gaps
    busy = [(0, 100), (200, 300), (600, 700)]
    g = measure_gaps(busy, [(100, 700)])
    assert g.gaps_us == [100, 300]
    assert g.max_gap == 300


def test_gaps_without_decode_phase():
    assert measure_gaps([(0, 10), (50, 60)], [(10, 10), (60, 60)]).max_gap == 0
    assert measure_gaps([], []).max_gap == 0


def test_gap_cdf():
    cdf = measure_gaps([(0, 1), (3, 4), (5, 6)], [(1, None)]).cdf()
    assert cdf == [(1, 0.5), (2, 1.0)]
