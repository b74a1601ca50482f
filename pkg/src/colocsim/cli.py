"""Command-line entry point: run, compare, gen-trace, schedule, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import cluster
from .baselines import PRESETS, REFERENCE_PRESET, STANDALONE, PolicySelection
from .metrics import (RunReport, UndefinedRatioError, csv_header, csv_row, dump_events,
                      normalized_offline_throughput, report_from_events, report_from_node,
                      ttft_tpot_increase)
from .sim import Scenario, simulate
from .trace import GenSpec, dump_trace, gen_trace

COMPARE_FIELDS = ("scenario", "preset", "seed", "ttft_increase_pct", "tpot_increase_pct",
                  "normalized_throughput", "offline_tokens_per_s", "utilization",
                  "max_disables_per_request", "faults")


class CliError(Exception):
    pass


def _csv_list(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in _csv_list(s)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _token_spec(s: str):
    lo, sep, hi = s.partition(":")
    try:
        return [int(lo), int(hi)] if sep else int(lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO:HI, got {s!r}") from None


def _load_scenario(args) -> Scenario:
    try:
        sc = Scenario.load(args.scenario)
    except FileNotFoundError:
        raise CliError(f"scenario file not found: {args.scenario}") from None
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid scenario {args.scenario}: {exc}") from None
    if getattr(args, "horizon_us", None) is not None:
        if args.horizon_us < 0:
            raise CliError("--horizon-us must be >= 0")
        sc.horizon_us = args.horizon_us
    return sc


def _parse_preset(name: str) -> PolicySelection:
    try:
        return PolicySelection.parse(name)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _run_one(sc: Scenario, selection: PolicySelection, seed: int, out: Optional[Path]):
    try:
        node = simulate(sc, selection, seed)
    except Exception as exc:
        raise CliError(f"run failed for preset {selection.name} seed {seed}: {exc}") from exc
    report = report_from_node(node)
    if out is not None:
        d = out / sc.name / selection.name / str(seed)
        d.mkdir(parents=True, exist_ok=True)
        (d / "events.jsonl").write_text(dump_events(node.sim.log))
        (d / "report.json").write_text(report.to_json())
    return report


def _append_csv(out: Path, reports: Sequence[RunReport]) -> None:
    path = out / "metrics.csv"
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(csv_header())
        for r in reports:
            fh.write(csv_row(r))


def cmd_run(args) -> int:
    sc = _load_scenario(args)
    selection = _parse_preset(args.preset or sc.preset)
    seed = sc.seed if args.seed is None else args.seed
    out = Path(args.out)
    report = _run_one(sc, selection, seed, out)
    _append_csv(out, [report])
    s = report.summary()
    print(f"{sc.name} {selection.name} seed={seed}: online {s['online_done']}/"
          f"{s['online_requests']} done, ttft mean {s['ttft_mean_us'] / 1000:.1f} ms, "
          f"offline {s['offline_tokens_per_s']:.1f} tok/s, faults {s['faults']}")
    return 0


def compare_rows(sc: Scenario, presets: Sequence[str], seeds: Sequence[int],
                 out: Optional[Path] = None) -> list[dict]:
    selections = [_parse_preset(p) for p in presets]
    rows, reports = [], []
    for seed in seeds:
        base = _run_one(sc, _parse_preset(STANDALONE), seed, out)
        reports.append(base)
        runs = {sel.name: _run_one(sc, sel, seed, out) for sel in selections}
        reports.extend(runs.values())
        ref = runs.get(REFERENCE_PRESET)
        if ref is None:
            ref = _run_one(sc, _parse_preset(REFERENCE_PRESET), seed, out)
            reports.append(ref)
        for name, rep in runs.items():
            ttft, tpot = ttft_tpot_increase(rep, base)
            try:
                norm = normalized_offline_throughput(rep, ref)
            except UndefinedRatioError:
                norm = float("nan")
            rows.append({"scenario": sc.name, "preset": name, "seed": seed,
                         "ttft_increase_pct": ttft, "tpot_increase_pct": tpot,
                         "normalized_throughput": norm,
                         "offline_tokens_per_s": rep.offline_tokens_per_s,
                         "utilization": rep.utilization,
                         "max_disables_per_request": rep.max_disables_per_request,
                         "faults": rep.faults})
    if out is not None:
        _append_csv(out, reports)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'preset':<16}{'seed':>6}{'TTFT%':>9}{'TPOT%':>9}{'norm.thr':>10}{'util':>8}"
    lines = [head]
    for r in rows:
        lines.append(f"{r['preset']:<16}{r['seed']:>6}{r['ttft_increase_pct']:>9.1f}"
                     f"{r['tpot_increase_pct']:>9.1f}{r['normalized_throughput']:>10.3f}"
                     f"{r['utilization']:>8.3f}")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    sc = _load_scenario(args)
    presets = args.presets or list(PRESETS)
    if len(presets) < 2:
        raise CliError("compare needs at least two presets")
    seeds = args.seeds if args.seeds is not None else [sc.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = compare_rows(sc, presets, seeds, out)
    with open(out / f"compare_{sc.name}.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    table = format_table(rows)
    (out / f"compare_{sc.name}.txt").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_gen_trace(args) -> int:
    if args.spec:
        try:
            spec = GenSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise CliError(f"invalid generator spec {args.spec}: {exc}") from None
    else:
        fields = {k: getattr(args, k) for k in (
            "pattern", "horizon_us", "rate", "base_rate", "spike_rate", "spike_period_us",
            "spike_width_us", "batch_size", "batch_period_us", "prompt_tokens",
            "output_tokens", "stream_id") if getattr(args, k) is not None}
        fields["request_class"] = args.request_class
        spec = GenSpec(**fields)
    try:
        records = gen_trace(spec, args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    Path(args.out).write_text(dump_trace(records))
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_schedule(args) -> int:
    try:
        nodes = cluster.load_nodes(args.nodes)
        jobs = cluster.load_jobs(args.jobs)
    except FileNotFoundError as exc:
        raise CliError(f"profile file not found: {exc.filename}") from None
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError(f"invalid profile: {exc}") from None
    placement = cluster.place(jobs, nodes)
    text = json.dumps(placement.to_dict(), indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    for job, reasons in sorted(placement.pending.items()):
        for nid, why in sorted(reasons.items()):
            print(f"pending {job} on {nid}: {why}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    try:
        with open(args.events, encoding="utf-8") as fh:
            report = report_from_events(fh)
    except FileNotFoundError:
        raise CliError(f"event log not found: {args.events}") from None
    except (ValueError, KeyError) as exc:
        raise CliError(f"malformed event log: {exc}") from None
    text = report.to_json()
    if args.check:
        stored = Path(args.check).read_text()
        if stored != text:
            print(f"report mismatch: {args.check} differs from recomputed metrics",
                  file=sys.stderr)
            return 1
        print("report matches event log")
        return 0
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(csv_header() + csv_row(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="colocsim",
                                 description="Online/offline LLM inference colocation simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="simulate one scenario under one preset")
    p.add_argument("--scenario", required=True)
    p.add_argument("--preset", help="overrides the scenario's preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out")
    p.add_argument("--horizon-us", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="standalone reference plus several presets")
    p.add_argument("--scenario", required=True)
    p.add_argument("--presets", type=_csv_list, help="comma-separated (default: all six)")
    p.add_argument("--seeds", type=_int_list, help="comma-separated (default: scenario seed)")
    p.add_argument("--out", default="out")
    p.add_argument("--horizon-us", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen-trace", help="write a synthetic JSON-Lines trace")
    p.add_argument("--spec", help="generator parameters as a JSON file")
    p.add_argument("--pattern", choices=("poisson", "spike", "batch"))
    p.add_argument("--class", dest="request_class", default="online",
                   choices=("online", "offline"))
    p.add_argument("--horizon-us", type=int)
    p.add_argument("--rate", type=float)
    p.add_argument("--base-rate", type=float)
    p.add_argument("--spike-rate", type=float)
    p.add_argument("--spike-period-us", type=int)
    p.add_argument("--spike-width-us", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--batch-period-us", type=int)
    p.add_argument("--prompt-tokens", type=_token_spec)
    p.add_argument("--output-tokens", type=_token_spec)
    p.add_argument("--stream-id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("schedule", help="place offline jobs on nodes from profile files")
    p.add_argument("--nodes", required=True)
    p.add_argument("--jobs", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("report", help="recompute metrics from an event log")
    p.add_argument("--events", required=True)
    p.add_argument("--out")
    p.add_argument("--check", help="compare against a stored report.json")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"colocsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
