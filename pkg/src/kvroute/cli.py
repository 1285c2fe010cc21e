"""``kvroute`` command line: simulate, bounds, sweep, gen-workload.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .bounds import run_bounds
from .errors import ConfigError
from .routing import write_trace
from .simulator import SimConfig, _rounded, expand_sweep, load_sweep, run, sweep
from .types import WorkloadSpec
from .workload import generate_workload, load_workload_spec

SUMMARY_KEYS = ("hit_rate", "makespan", "throughput", "latency_p50", "latency_p95", "ttft_p50", "ttft_p95")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvroute", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        if config_required:
            sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", default=".", help="output directory (default: current)")
        sp.add_argument("--seed", type=int, default=None, help="override every seed")
        sp.add_argument("--format", choices=("csv", "json"), default=None, help="write only this format")

    s = sub.add_parser("simulate", help="run one simulation")
    common(s)
    s.add_argument("--trace", action="store_true", help="also write the per-decision routing trace")

    b = sub.add_parser("bounds", help="replay the adversarial constructions against each policy")
    common(b, config_required=False)
    b.add_argument("--mode", choices=("single", "batch", "random_tail"), default="single")
    b.add_argument("--capacity", type=int, default=16)
    b.add_argument("--min-len", type=int, default=4)
    b.add_argument("--beta", type=int, default=1)
    b.add_argument("--policies", type=_csv_list(str), default=["leaf_lru", "rlt", "opt"])
    b.add_argument("--phases", type=int, default=200)
    b.add_argument("--n", type=int, default=20000, help="path queries for random_tail mode")

    w = sub.add_parser("sweep", help="run a grid of configs")
    common(w)
    w.add_argument("--arms", type=_csv_list(str), default=None, help="e.g. lbgr+rlt,cache_aware+leaf_lru")
    w.add_argument("--seeds", type=_csv_list(int), default=None)
    w.add_argument("--rates", type=_csv_list(float), default=None)
    w.add_argument("--workers", type=_csv_list(int), default=None)
    w.add_argument("--capacities", type=_csv_list(int), default=None)
    w.add_argument("--jobs", type=int, default=1)

    g = sub.add_parser("gen-workload", help="materialize a workload")
    common(g)
    return p


def _formats(args) -> tuple:
    return (args.format,) if args.format else ("csv", "json")


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def cmd_simulate(args) -> int:
    base, _ = load_sweep(args.config)
    cfg = base.with_seed(args.seed) if args.seed is not None else base
    report = run(cfg, record_trace=args.trace)
    out = Path(args.out)
    if "json" in _formats(args):
        _write(out, "report.json", report.to_json())
    if "csv" in _formats(args):
        _write(out, "report.csv", report.to_csv())
    if args.trace:
        buf = io.StringIO()
        write_trace(report.decisions, buf, cfg.workers)
        _write(out, "trace.csv", buf.getvalue())
    s = _rounded(report.summary)
    print(" ".join(f"{k}={s[k]}" for k in SUMMARY_KEYS if k in s))
    return 0


def cmd_bounds(args) -> int:
    report = run_bounds(
        args.mode, args.capacity, args.min_len, args.beta, args.policies,
        phases=args.phases, n=args.n, seed=args.seed or 0,
    )
    print(report.table())
    out = Path(args.out)
    if "csv" in _formats(args):
        _write(out, "bounds.csv", report.to_csv())
    if "json" in _formats(args):
        doc = {
            "mode": report.mode, "capacity": report.capacity, "min_len": report.min_len, "beta": report.beta,
            "summary": report.summary, "predictions": report.predictions, "extra": report.extra,
        }
        _write(out, "bounds.json", json.dumps(_rounded(doc), sort_keys=True, indent=2, default=str) + "\n")
    return 0


def cmd_sweep(args) -> int:
    base, axes = load_sweep(args.config)
    for name in ("arms", "seeds", "rates", "workers", "capacities"):
        if getattr(args, name) is not None:
            axes[name] = getattr(args, name)
    if args.seed is not None:
        axes["seeds"] = [args.seed]
    grid = list(expand_sweep(base, **axes))
    reports = sweep([cfg for _, cfg in grid], jobs=args.jobs)
    rows = []
    for (labels, _), rep in zip(grid, reports):
        rows.append({**labels, **{k: rep.summary[k] for k in SUMMARY_KEYS}})
    rows = _rounded(rows)
    out = Path(args.out)
    if "csv" in _formats(args):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        _write(out, "sweep.csv", buf.getvalue())
    if "json" in _formats(args):
        _write(out, "sweep.json", json.dumps(rows, sort_keys=True, indent=2) + "\n")
    for r in rows:
        print(" ".join(f"{k}={v}" for k, v in r.items()))
    return 0


def _workload_from(path) -> WorkloadSpec:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and ("base" in data or "workers" in data):
        return load_sweep(path)[0].workload
    return load_workload_spec(path)


def cmd_gen_workload(args) -> int:
    try:
        spec = _workload_from(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read workload config {args.config}: {exc}") from exc
    if args.seed is not None:
        spec.seed = args.seed
    queries = generate_workload(spec)
    out = Path(args.out)
    if "json" in _formats(args):
        doc = {"workload": spec.to_dict(), "queries": [q.to_dict() for q in queries]}
        _write(out, "workload.json", json.dumps(doc, sort_keys=True) + "\n")
    if "csv" in _formats(args):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "group", "arrival_time", "input_len", "output_len", "input", "output"])
        for q in queries:
            w.writerow([q.id, q.group, q.arrival_time, len(q.input), len(q.output),
                        " ".join(map(str, q.input)), " ".join(map(str, q.output))])
        _write(out, "workload.csv", buf.getvalue())
    print(f"{len(queries)} queries")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "bounds": cmd_bounds,
    "sweep": cmd_sweep,
    "gen-workload": cmd_gen_workload,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"kvroute: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"kvroute: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
