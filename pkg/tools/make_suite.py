"""Regenerate the committed scenarios under src/colocsim/scenarios: the
ten-scenario interference suite and the steady-pressure headroom scenario."""

import json
from pathlib import Path


def spike(base, peak, period, width, prompt, output):
    return {"pattern": "spike", "base_rate": base, "spike_rate": peak, "spike_period_us": period,
            "spike_width_us": width, "prompt_tokens": prompt, "output_tokens": output}


def batch(size, period, prompt, output):
    return {"pattern": "batch", "batch_size": size, "batch_period_us": period,
            "prompt_tokens": prompt, "output_tokens": output}


off_small = {"pattern": "batch", "batch_size": 48, "batch_period_us": 4_000_000,
             "prompt_tokens": [512, 2048], "output_tokens": [64, 256]}
off_big = {"pattern": "batch", "batch_size": 16, "batch_period_us": 2_000_000,
           "prompt_tokens": [4096, 8192], "output_tokens": [32, 128]}
off_poi = {"pattern": "poisson", "rate": 20, "prompt_tokens": [1024, 4096],
           "output_tokens": [64, 256]}

# (name, online streams, offline streams, parameter overrides)
S = [
    ("spike-chat", [spike(2, 40, 1_000_000, 200_000, [256, 1024], [16, 64])], [off_small], {}),
    ("spike-long-prompt", [spike(1, 20, 2_000_000, 300_000, [2048, 4096], [16, 48])],
     [off_poi], {}),
    ("spike-dense", [spike(4, 80, 1_500_000, 150_000, [512, 2048], [32, 96])], [off_big], {}),
    ("spike-rare", [spike(0.5, 30, 4_000_000, 250_000, [512, 1536], [8, 32])], [off_small],
     {"decode_gap": {"uniform": [100, 400]}}),
    ("spike-wide", [spike(1, 15, 3_000_000, 1_000_000, [768, 2048], [24, 80])],
     [off_big, off_poi], {}),
    ("batch-burst", [batch(8, 1_000_000, [256, 1024], [16, 64])], [off_small], {}),
    ("batch-large", [batch(24, 3_000_000, [128, 768], [8, 48])], [off_poi], {}),
    ("batch-sparse", [batch(4, 2_500_000, [1024, 3072], [16, 32])], [off_big],
     {"decode_gap": {"uniform": [20, 200]}}),
    ("batch-mixed", [batch(6, 1_500_000, [512, 1024], [32, 64]),
                     spike(0.5, 10, 5_000_000, 500_000, [256, 512], [16, 32])], [off_small], {}),
    ("batch-heavy", [batch(16, 2_000_000, [512, 2048], [32, 128])], [off_poi, off_small],
     {"decode_gap": {"uniform": [50, 500]}}),
]

# Stationary spiky load for the headroom controller.  One-second windows keep
# 120 windows inside a two-minute horizon; a larger additive step (T_init/2)
# lets T settle where roughly one pressure event lands per window.
STEADY = {
    "name": "miad-steady", "horizon_us": 120_000_000, "seed": 3, "preset": "valve", "gpus": 1,
    "online": [spike(3, 30, 2_000_000, 300_000, [512, 2048], [32, 128])],
    "offline": [{"pattern": "poisson", "rate": 40, "prompt_tokens": [1024, 4096],
                 "output_tokens": [64, 256]}],
    "params": {"window_us": 1_000_000, "T_init_us": 200_000, "delta_us": 100_000,
               "target_rate": 1.0},
}

# One small example per preset, each exercising that preset's own knobs.
_chat = spike(2, 30, 1_000_000, 200_000, [512, 2048], [16, 64])
_bulk = {"pattern": "poisson", "rate": 10, "prompt_tokens": [1024, 4096],
         "output_tokens": [64, 256]}
EXAMPLES = {
    "valve": {"description": "channel gate plus reclaimable shared pool with adaptive headroom",
              "params": {"H_init": 4, "alpha": 1.5, "beta": 2.0, "T_init_us": 500_000,
                         "window_us": 10_000_000, "target_rate": 1.0,
                         "remap_us_per_handle": 50}},
    "kernel+uvm": {"description": "switch at offline iteration boundaries; demand-paged memory",
                   "params": {"uvm_penalty_us_per_page": 100}},
    "gpreempt+uvm": {"description": "timeslice preemption; demand-paged memory",
                     "params": {"gpreempt_timeslice_us": 500}},
    "channel+uvm": {"description": "channel gate on a two-GPU node without the lock bypass",
                    "gpus": 2, "params": {"lock_bypass": False, "per_gpu_toggle_us": 700}},
    "channel+prism": {"description": "channel gate; online waits for offline to free memory",
                      "online": [{"records": [
                          {"arrival_us": 250_000, "prompt_tokens": 1024, "output_tokens": 32},
                          {"arrival_us": 250_000, "prompt_tokens": 512, "output_tokens": 8}]},
                                 _chat]},
    "channel+static": {"description": "channel gate; offline capped from a calibration window",
                       "params": {"static_calibration_fraction": 0.1}},
}

ROOT = Path(__file__).resolve().parents[1] / "src" / "colocsim" / "scenarios"
OUT = ROOT / "suite"

if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, online, offline, params in S:
        for i, stream in enumerate(online):
            stream["stream_id"] = f"on{i}"
        doc = {"name": name, "horizon_us": 20_000_000, "seed": 7, "preset": "valve", "gpus": 1,
               "online": online, "offline": offline, "params": params}
        (OUT / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
    STEADY["online"][0]["stream_id"] = "on0"
    (ROOT / "examples").mkdir(exist_ok=True)
    for preset, extra in EXAMPLES.items():
        doc = {"name": f"example-{preset.replace('+', '-')}",
               "description": extra["description"], "horizon_us": 5_000_000, "seed": 1,
               "preset": preset, "gpus": extra.get("gpus", 1),
               "online": extra.get("online", [_chat]), "offline": [_bulk],
               "params": extra.get("params", {})}
        (ROOT / "examples" / f"{preset.replace('+', '-')}.json").write_text(
            json.dumps(doc, indent=1) + "\n")
    (ROOT / "miad-steady.json").write_text(json.dumps(STEADY, indent=1) + "\n")
