"""dtn-learn command line: node daemon, simulator, corpus generator, reports.

Flags and exit codes are documented in docs/cli.md: 0 success, 2 invalid
config/scenario/arguments, 3 bind failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import re
import statistics
import sys
import time
from importlib import resources
from pathlib import Path

from .daemon import BindFailure, ConfigInvalid, Daemon, NodeConfig
from .gateway import slugify, synthetic_text
from .sim import SimError, parse_scenario, run_sim

log = logging.getLogger(__name__)

_SIZE_RE = re.compile(r"^(\d+)\s*(gb|mb|kb|b)?$", re.IGNORECASE)
_SIZE_UNITS = {"b": 1, "kb": 1024, "mb": 1024 ** 2, "gb": 1024 ** 3, None: 1}


def parse_size(text: str) -> int:
    m = _SIZE_RE.match(text.strip())
    if not m:
        raise ValueError(f"bad size {text!r} (use e.g. 10MB, 512KB, 1048576)")
    unit = m.group(2).lower() if m.group(2) else None
    return int(m.group(1)) * _SIZE_UNITS[unit]


def resolve_scenario(name: str) -> dict:
    path = Path(name)
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    basename = name if name.endswith(".json") else f"{name}.json"
    ref = resources.files("dtn_learn").joinpath("scenarios").joinpath(basename)
    if ref.is_file():
        return json.loads(ref.read_text(encoding="utf-8"))
    raise FileNotFoundError(f"no scenario file or bundled scenario named {name!r}")


def print_summary(summary: dict, config: dict, out=sys.stdout) -> None:
    res = summary
    def fmt(x, unit=""):
        if x is None:
            return "-"
        if isinstance(x, float):
            return f"{x:,.1f}{unit}"
        return f"{x:,}{unit}"

    rows = [
        ("mule cycle period", fmt(config.get("cycle_period_s"), " s")),
        ("mules", fmt(config.get("mule_count"))),
        ("sim duration", fmt(config.get("sim_duration_s"), " s")),
        ("contacts", fmt(res.get("contacts_total"))),
        ("aborted sessions", fmt(res.get("aborted_sessions"))),
        ("resumed transfers", fmt(res.get("resumed_transfers"))),
        ("requests fulfilled", f"{res.get('requests_fulfilled', 0)}/{res.get('requests_total', 0)}"),
        ("mean RTT", fmt(res.get("mean_rtt_s"), " s")),
        ("median RTT", fmt(res.get("median_rtt_s"), " s")),
        ("mean freshness", fmt(res.get("mean_freshness_s"), " s")),
        ("payload delivered", fmt(res.get("payload_bytes_delivered"), " B")),
        ("bundles delivered", fmt(res.get("bundles_delivered"))),
    ]
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        print(f"  {key:<{width}}  {value}", file=out)


def cmd_run(args) -> int:
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = NodeConfig.parse(args.config)
    except ConfigInvalid as e:
        print(f"config invalid: {e}", file=sys.stderr)
        return 2
    try:
        daemon = Daemon(cfg)
        return daemon.run_forever()
    except BindFailure as e:
        print(f"bind failure: {e}", file=sys.stderr)
        return 3


def _run_one(scenario: dict, seed: int | None, out_dir: Path) -> dict:
    if seed is not None:
        scenario = dict(scenario)
        scenario["seed"] = seed
    cfg = parse_scenario(scenario)
    started = time.monotonic()
    result = run_sim(cfg)
    elapsed = time.monotonic() - started
    echo = {
        "cycle_period_s": cfg.cycle_period,
        "mule_count": cfg.mule_count,
        "seed": cfg.seed,
        "sim_duration_s": cfg.sim_duration,
        "link_rate_bps": cfg.link_rate_bps,
        "protocol_overhead": cfg.overhead,
        "chunk_size": cfg.chunk_size,
    }
    result.metrics.write(out_dir, config_echo=echo)
    summary = result.metrics.summary()
    print(f"scenario complete in {elapsed:.1f}s wall time -> {out_dir}", file=sys.stderr)
    print_summary(summary, echo)
    return summary


def cmd_sim(args) -> int:
    try:
        scenario = resolve_scenario(args.scenario)
    except (OSError, json.JSONDecodeError, FileNotFoundError) as e:
        print(f"scenario invalid: {e}", file=sys.stderr)
        return 2
    out_root = Path(args.out)
    try:
        if args.sweep:
            m = re.match(r"^(\w+)=(\d+)\.\.(\d+)$", args.sweep)
            if not m:
                print(f"bad --sweep {args.sweep!r}, expected key=a..b", file=sys.stderr)
                return 2
            key, lo, hi = m.group(1), int(m.group(2)), int(m.group(3))
            sweep_rows = []
            for value in range(lo, hi + 1):
                variant = dict(scenario)
                variant[key] = value
                print(f"== {key}={value} ==")
                summary = _run_one(variant, args.seed, out_root / f"{key}-{value}")
                sweep_rows.append((value, summary.get("mean_rtt_s"),
                                   summary.get("requests_fulfilled")))
            print(f"\nsweep over {key}:")
            print(f"  {key:>12}  {'mean RTT (s)':>14}  {'fulfilled':>9}")
            for value, rtt, ok in sweep_rows:
                rtt_s = "-" if rtt is None else f"{rtt:,.1f}"
                print(f"  {value:>12}  {rtt_s:>14}  {ok:>9}")
        else:
            _run_one(scenario, args.seed, out_root)
    except SimError as e:
        print(f"scenario invalid: {e}", file=sys.stderr)
        return 2
    return 0


def cmd_gen_corpus(args) -> int:
    try:
        lo_txt, _, hi_txt = args.size_range.partition(":")
        lo, hi = parse_size(lo_txt), parse_size(hi_txt or lo_txt)
        if lo > hi or args.count < 0:
            raise ValueError("size range inverted or negative count")
    except ValueError as e:
        print(f"invalid arguments: {e}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)
    topics = args.topics.split(",") if args.topics else [
        f"topic-{i:02d}" for i in range(args.count)
    ]
    if len(topics) != args.count:
        print("invalid arguments: --topics count mismatch", file=sys.stderr)
        return 2
    for topic in topics:
        size = rng.randint(lo, hi)
        body = synthetic_text(f"{args.seed}:{topic}", size)
        (out / f"{slugify(topic)}.txt").write_text(body, encoding="utf-8")
        print(f"  wrote {slugify(topic)}.txt ({size:,} B)")
    print(f"corpus of {args.count} articles in {out}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out_dir)
    summary_path = out / "summary.json"
    if not summary_path.exists():
        print(f"no summary.json under {out}", file=sys.stderr)
        return 2
    data = json.loads(summary_path.read_text(encoding="utf-8"))
    print(f"report for {out}:")
    print_summary(data.get("results", {}), data.get("config", {}))
    req_csv = out / "requests.csv"
    if req_csv.exists():
        with open(req_csv, newline="") as f:
            rows = list(csv.DictReader(f))
        if rows:
            rtts = [float(r["rtt_s"]) for r in rows if r["rtt_s"]]
            print(f"\n  requests ({len(rows)}):")
            for r in rows:
                rtt = f"{float(r['rtt_s']):,.0f} s" if r["rtt_s"] else "-"
                print(f"    {r['topic']:<24} {r['status']:<10} rtt={rtt}")
            if rtts:
                print(f"  rtt: mean={statistics.fmean(rtts):,.1f} s"
                      f" median={statistics.median(rtts):,.1f} s"
                      f" max={max(rtts):,.1f} s")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dtn-learn",
        description="Store-and-forward digital learning network tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a node daemon from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--log-level", default="info",
                       choices=["debug", "info", "warning", "error"])
    p_run.set_defaults(fn=cmd_run)

    p_sim = sub.add_parser("sim", help="run a simulator scenario")
    p_sim.add_argument("scenario", help="scenario file path or bundled name")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", default="sim-out")
    p_sim.add_argument("--sweep", default=None, metavar="KEY=A..B",
                       help="run the scenario for each integer value of KEY")
    p_sim.set_defaults(fn=cmd_sim)

    p_gen = sub.add_parser("gen-corpus", help="generate a synthetic article corpus")
    p_gen.add_argument("--count", type=int, required=True)
    p_gen.add_argument("--size-range", default="10MB:30MB")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--topics", default="")
    p_gen.set_defaults(fn=cmd_gen_corpus)

    p_rep = sub.add_parser("report", help="print a human summary of sim outputs")
    p_rep.add_argument("out_dir")
    p_rep.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
