"""Batch entry point: stress, exploration, benchmark, and replay campaigns.

Exit codes: 0 no violations, 1 violations found (counterexample traces
written when a trace directory is given), 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .auditors import flatten, run_all
from .events import TraceBundle
from .explore import ExploreBounds, explore
from .harness import WorkloadConfig, build_workload, run_workload
from .metrics import aggregate
from .schedule import CrashPolicy, ScheduleConfig

log = logging.getLogger("rmesim")

_BENCH_MATRIX = (2, 4, 8, 16)


def _parse_seeds(spec: str) -> list[int]:
    seeds: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def _emit(out, obj: dict) -> None:
    out.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _write_counterexample(bundle: TraceBundle, trace_dir: str, name: str,
                          compress: bool) -> str:
    os.makedirs(trace_dir, exist_ok=True)
    path = os.path.join(trace_dir, name + (".ndjson.gz" if compress else ".ndjson"))
    bundle.write_ndjson(path, compress=compress)
    return path


def _stress(args, out) -> int:
    seeds = _parse_seeds(args.seeds)
    bad = 0
    for model in (("cc", "dsm") if args.model == "both" else (args.model,)):
        for seed in seeds:
            wcfg = WorkloadConfig(n=args.n, model=model, seed=seed,
                                  ncs_max=args.ncs_max,
                                  payload_words=args.payload_words)
            scfg = ScheduleConfig(seed=seed, n=args.n, max_events=args.events,
                                  crash=CrashPolicy.random(args.crash_prob)
                                  if args.crash_prob > 0 else CrashPolicy())
            bundle, rep = run_workload(wcfg, scfg)
            scans = run_all(bundle, include_liveness=True, patience=args.patience)
            found = rep.violations + flatten(scans)
            line = rep.to_dict()
            line["mode"] = "stress"
            line["scan_violations"] = [v.to_dict() for v in flatten(scans)]
            _emit(out, line)
            if found:
                bad += 1
                if args.trace_dir:
                    p = _write_counterexample(
                        bundle, args.trace_dir, f"stress-{model}-n{args.n}-s{seed}",
                        args.gzip)
                    log.warning("counterexample written to %s", p)
    return 1 if bad else 0


def _explore(args, out) -> int:
    wcfg = WorkloadConfig(n=args.n, model=args.model if args.model != "both" else "dsm",
                          passages=args.passages, ncs_max=0,
                          payload_words=args.payload_words, seed=args.seeds_first)
    wl = build_workload(wcfg)
    rep = explore(wl.sim, ExploreBounds(crash_budget=args.crash_budget,
                                        max_states=args.max_states))
    line = rep.to_dict()
    line["mode"] = "explore"
    line["n"] = args.n
    _emit(out, line)
    if rep.violations and args.trace_dir:
        for i, cx in enumerate(rep.counterexamples):
            _write_counterexample(cx, args.trace_dir, f"explore-cx{i}", args.gzip)
    if rep.truncated:
        log.warning("state space truncated at %d states", rep.states)
    return 1 if rep.violations else 0


def _bench(args, out) -> int:
    ns = [args.n] if args.n else list(_BENCH_MATRIX)
    seeds = _parse_seeds(args.seeds)
    bad = 0
    for model in (("cc", "dsm") if args.model == "both" else (args.model,)):
        for n in ns:
            agg_op: dict = {}
            agg_pass = {"cc": 0, "dsm": 0}
            for seed in seeds:
                wcfg = WorkloadConfig(n=n, model=model, seed=seed,
                                      ncs_max=args.ncs_max,
                                      payload_words=args.payload_words)
                scfg = ScheduleConfig(seed=seed, n=n, max_events=args.events,
                                      crash=CrashPolicy.random(args.crash_prob)
                                      if args.crash_prob > 0 else CrashPolicy())
                bundle, rep = run_workload(wcfg, scfg)
                if rep.violations:
                    bad += 1
                m = aggregate(bundle)
                for op, v in m.max_op_rmr.items():
                    cur = agg_op.setdefault(op, {"cc": 0, "dsm": 0})
                    cur["cc"] = max(cur["cc"], v["cc"])
                    cur["dsm"] = max(cur["dsm"], v["dsm"])
                for k in agg_pass:
                    agg_pass[k] = max(agg_pass[k], m.max_reclaim_per_passage[k])
            _emit(out, {"mode": "bench", "model": model, "n": n,
                        "seeds": len(seeds), "max_op_rmr": agg_op,
                        "max_reclaim_per_passage": agg_pass})
    return 1 if bad else 0


def _replay(path: str, out) -> int:
    try:
        bundle = TraceBundle.read_ndjson(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: cannot read trace {path}: {e}", file=sys.stderr)
        return 2
    results = run_all(bundle)
    found = flatten(results)
    _emit(out, {"mode": "audit-replay", "trace": path,
                "events": len(bundle.events),
                "violations": [v.to_dict() for v in found],
                "by_auditor": {k: len(v) for k, v in sorted(results.items())}})
    return 1 if found else 0


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rmesim")
    sub = ap.add_subparsers(dest="cmd", required=True)

    runp = sub.add_parser("run", help="run a campaign")
    runp.add_argument("--mode", choices=("stress", "explore", "bench", "audit-replay"),
                      default="stress")
    runp.add_argument("--config", help="JSON config file; flags win over it")
    runp.add_argument("--n", type=int, default=None)
    runp.add_argument("--seeds", default="1")
    runp.add_argument("--crash-prob", type=float, default=0.0)
    runp.add_argument("--events", type=int, default=100_000)
    runp.add_argument("--passages", type=int, default=2)
    runp.add_argument("--crash-budget", type=int, default=1)
    runp.add_argument("--patience", type=int, default=20_000)
    runp.add_argument("--max-states", type=int, default=2_000_000)
    runp.add_argument("--model", choices=("cc", "dsm", "both"), default="dsm")
    runp.add_argument("--ncs-max", type=int, default=3)
    runp.add_argument("--payload-words", type=int, default=4)
    runp.add_argument("--out", help="report file (newline-delimited JSON); default stdout")
    runp.add_argument("--trace-dir", help="directory for counterexample traces")
    runp.add_argument("--trace", help="trace file for audit-replay mode")
    runp.add_argument("--gzip", action="store_true")

    rp = sub.add_parser("replay", help="re-run all auditors over a stored trace")
    rp.add_argument("trace")
    rp.add_argument("--out")
    return ap


_CONFIG_KEYS = ("mode", "n", "seeds", "crash_prob", "events", "passages",
                "crash_budget", "patience", "max_states", "model", "ncs_max",
                "payload_words", "out", "trace_dir", "trace", "gzip")


def _apply_config(args, argv: list[str]) -> None:
    if not getattr(args, "config", None):
        if args.n is None:
            args.n = 2
        return
    with open(args.config) as fh:
        conf = json.load(fh)
    given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key in _CONFIG_KEYS:
        if key in conf and key not in given:
            setattr(args, key, conf[key])
    if args.n is None:
        args.n = 2


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("RME_RECLAIM_LOG", "WARNING"))
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0

    out = sys.stdout
    close = False
    try:
        if args.cmd == "replay":
            if args.out:
                out = open(args.out, "w")
                close = True
            return _replay(args.trace, out)

        _apply_config(args, argv)
        args.seeds_first = _parse_seeds(args.seeds)[0]
        if args.out:
            out = open(args.out, "w")
            close = True
        if args.mode == "stress":
            if args.n < 1:
                raise ValueError("n must be >= 1")
            return _stress(args, out)
        if args.mode == "explore":
            if not 1 <= args.n <= 3:
                raise ValueError("explore needs 1 <= n <= 3")
            return _explore(args, out)
        if args.mode == "bench":
            if args.n is not None and args.n < 1:
                raise ValueError("n must be >= 1")
            return _bench(args, out)
        if args.mode == "audit-replay":
            if not args.trace:
                raise ValueError("audit-replay needs --trace")
            return _replay(args.trace, out)
        raise ValueError(f"unknown mode {args.mode}")
    except (ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    finally:
        if close:
            out.close()


if __name__ == "__main__":
    raise SystemExit(main())
