"""Discrete-event serving simulator.

Queries arrive, get routed to a worker, wait FIFO for one of ``beta`` batch
slots, then run prefill and decode as lump costs. The worker cache is
accessed with the full token path when the query is dequeued, and the path
stays pinned until the query completes.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cost import WorkerState, apply_assignment, makespan, prefill_cost
from .errors import AdmissionError, ConfigError, ConsistencyError
from .eviction import canonical_policy, make_policy
from .radix import PrefixKeys, RadixCache
from .routing import GlobalTracker, RoutingDecision, make_router
from .types import CostParams, QueryMetrics, WorkloadSpec, _known_fields
from .workload import generate_workload

# same-time ordering: decay < completion < prefill_done < arrival
DECAY, COMPLETION, PREFILL_DONE, ARRIVAL = range(4)


@dataclass
class SimConfig:
    workers: int = 4
    capacity: int = 4096
    beta: int = 4
    cost: CostParams = field(default_factory=CostParams)
    routing: dict = field(default_factory=lambda: {"policy": "lbgr"})
    eviction: dict = field(default_factory=lambda: {"policy": "leaf_lru", "seed": 0})
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    run_seed: int = 0
    strict_capacity: bool = False

    def validate(self) -> None:
        if self.workers < 1 or self.capacity < 1 or self.beta < 1:
            raise ConfigError("workers, capacity and beta must be >= 1")
        if canonical_policy(self.eviction.get("policy", "leaf_lru")) == "opt" and self.workers != 1:
            raise ConfigError("opt eviction needs the full future and is only supported with one worker")
        self.workload.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["workload"] = self.workload.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        d = _known_fields(cls, d, "config")
        if "cost" in d:
            try:
                d["cost"] = CostParams(**d["cost"])
            except TypeError as exc:
                raise ConfigError(f"bad cost block: {exc}") from exc
        if "workload" in d:
            d["workload"] = WorkloadSpec.from_dict(d["workload"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def with_seed(self, seed: int) -> SimConfig:
        """Copy with every stochastic component reseeded."""
        d = self.to_dict()
        d["workload"]["seed"] = seed
        d["eviction"]["seed"] = seed
        d["run_seed"] = seed
        return SimConfig.from_dict(d)


def load_config(path) -> SimConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return SimConfig.from_dict(data)


@dataclass
class RunReport:
    config: dict
    metrics: list  # QueryMetrics, by query id
    summary: dict
    loads: list
    decisions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "summary": _rounded(self.summary),
            "loads": _rounded(self.loads),
            "queries": [_rounded(asdict(m)) for m in self.metrics],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        # one header for both row kinds; cells that do not apply stay empty
        cols = list(QueryMetrics.__dataclass_fields__)
        s = _rounded(self.summary)
        skeys = sorted(s)
        w.writerow(["row"] + cols + skeys)
        for m in self.metrics:
            w.writerow(["query"] + [_rounded(getattr(m, c)) for c in cols] + [""] * len(skeys))
        w.writerow(["summary"] + [""] * len(cols) + [s[k] for k in skeys])
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> RunReport:
        d = json.loads(text)
        return cls(
            config=d["config"],
            metrics=[QueryMetrics(**q) for q in d["queries"]],
            summary=d["summary"],
            loads=d["loads"],
        )


def _rounded(x):
    if isinstance(x, float):
        return round(x, 6)
    if isinstance(x, dict):
        return {k: _rounded(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_rounded(v) for v in x]
    return x


class _Engine:
    def __init__(self, cfg: SimConfig, record_trace: bool, queries=None):
        cfg.validate()
        self.cfg = cfg
        self.queries = list(queries) if queries is not None else generate_workload(cfg.workload)
        longest = max((len(q.path) for q in self.queries), default=0)
        if cfg.beta * longest > cfg.capacity:
            msg = f"beta * max path length = {cfg.beta * longest} exceeds cache capacity {cfg.capacity}"
            if cfg.strict_capacity:
                raise ConfigError(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
        self.keys = PrefixKeys()
        ev = dict(cfg.eviction)
        kind = canonical_policy(ev.get("policy", "leaf_lru"))
        seed = ev.get("seed", 0)
        future = None
        if kind == "opt":
            future = [k for q in self.queries for k in self.keys.path(q.path)]
        self.workers = [WorkerState(i, RadixCache(cfg.capacity, self.keys)) for i in range(cfg.workers)]
        self.policies = [
            make_policy(kind, cfg.capacity, seed=f"{seed}:{i}", future=future) for i in range(cfg.workers)
        ]
        self.tracker = GlobalTracker(cfg.workers, cfg.capacity, self.keys, cfg.routing.get("tracker_delay", 0))
        self.router = make_router(cfg.routing, cfg.workers, cfg.cost, seed=cfg.run_seed)
        self.delta_t = getattr(getattr(self.router, "state", None), "delta_t", None)
        self.record_trace = record_trace
        self.decisions: list[RoutingDecision] = []
        self.heap: list = []
        self.seq = 0
        self.dequeued: dict[int, float] = {}
        self.prefilled: dict[int, float] = {}
        self.hits: dict[int, tuple] = {}
        self.assigned_to: dict[int, int] = {}
        self.metrics: dict[int, QueryMetrics] = {}
        self.evictions = 0
        self.max_in_flight = 0

    def push(self, time, kind, payload=None):
        heapq.heappush(self.heap, (time, kind, self.seq, payload))
        self.seq += 1

    def run(self) -> RunReport:
        for q in self.queries:
            self.push(q.arrival_time, ARRIVAL, q)
        if self.delta_t is not None and self.queries:
            self.push(self.delta_t, DECAY)
        handlers = {
            ARRIVAL: self.on_arrival,
            PREFILL_DONE: self.on_prefill_done,
            COMPLETION: self.on_completion,
        }
        while self.heap:
            now, kind, _, payload = heapq.heappop(self.heap)
            if kind == DECAY:
                if len(self.metrics) == len(self.queries):
                    continue
                self.router.decay_tick()
                self.push(now + self.delta_t, DECAY)
            else:
                handlers[kind](now, payload)
        return self.report()

    def on_arrival(self, now, q):
        pending = [len(w.queue) + len(w.in_flight) for w in self.workers]
        decision = self.router.route(q, self.tracker.matches(q.input), pending)
        if self.record_trace:
            self.decisions.append(decision)
        worker = self.workers[decision.chosen]
        self.assigned_to[q.id] = worker.index
        worker.queue.append(q)
        self.dispatch(worker, now)

    def dispatch(self, worker: WorkerState, now):
        cfg = self.cfg
        while worker.queue and len(worker.in_flight) < cfg.beta:
            q = worker.queue.popleft()
            try:
                out = worker.cache.access_path(q.path, self.policies[worker.index])
            except AdmissionError as exc:
                raise AdmissionError(
                    f"worker {worker.index} at t={now} could not admit query {q.id} "
                    f"(path {len(q.path)} tokens, {len(worker.in_flight)} in flight): {exc}"
                ) from exc
            if out.hits + out.misses != len(q.path):
                raise ConsistencyError(f"query {q.id}: hits + misses != path length")
            self.tracker.apply(worker.index, out, q.path)
            self.tracker.verify(worker.index, worker.cache)
            self.evictions += len(out.evicted)
            h = min(out.hits, len(q.input))
            cost = prefill_cost(cfg.cost, len(q.input), h) + cfg.cost.output_cost_per_token * len(q.output)
            apply_assignment(self.workers, worker.index, cost)
            worker.in_flight.add(q.id)
            self.max_in_flight = max(self.max_in_flight, len(worker.in_flight))
            if len(worker.in_flight) > cfg.beta:
                raise ConsistencyError(f"worker {worker.index} exceeded {cfg.beta} in-flight queries")
            self.dequeued[q.id] = now
            self.hits[q.id] = (h, out.hits, out.misses)
            self.push(now + prefill_cost(cfg.cost, len(q.input), h), PREFILL_DONE, (q, worker.index))

    def on_prefill_done(self, now, payload):
        q, i = payload
        self.prefilled[q.id] = now
        self.push(now + self.cfg.cost.output_cost_per_token * len(q.output), COMPLETION, payload)

    def on_completion(self, now, payload):
        q, i = payload
        worker = self.workers[i]
        if q.id in self.metrics or q.id not in worker.in_flight:
            raise ConsistencyError(f"query {q.id} completed twice or on the wrong worker")
        worker.cache.release_path(q.path)
        worker.in_flight.remove(q.id)
        latency = now - q.arrival_time
        self.router.on_complete(q.id, latency)
        h, path_hits, path_misses = self.hits[q.id]
        self.metrics[q.id] = QueryMetrics(
            query_id=q.id, worker=i, hit_tokens=h, input_tokens=len(q.input),
            ttft=self.prefilled[q.id] - q.arrival_time, latency=latency,
            queue_wait=self.dequeued[q.id] - q.arrival_time, arrival_time=q.arrival_time,
            path_hits=path_hits, path_misses=path_misses,
        )
        self.dispatch(worker, now)

    def report(self) -> RunReport:
        if len(self.metrics) != len(self.queries):
            raise ConsistencyError(f"{len(self.queries)} arrivals but {len(self.metrics)} completions")
        metrics = [self.metrics[q.id] for q in self.queries]
        loads = [w.queue_load for w in self.workers]
        return RunReport(
            config=self.cfg.to_dict(), metrics=metrics, summary=summarize(metrics, loads, self),
            loads=loads, decisions=self.decisions,
        )


def summarize(metrics: list, loads: list, engine: _Engine | None = None) -> dict:
    s: dict = {"queries": len(metrics), "makespan": makespan(loads) if loads else 0.0}
    if metrics:
        lat = np.array([m.latency for m in metrics])
        ttft = np.array([m.ttft for m in metrics])
        inputs = sum(m.input_tokens for m in metrics)
        start = min(m.arrival_time for m in metrics)
        end = max(m.arrival_time + m.latency for m in metrics)
        duration = end - start
        s.update(
            hit_rate=sum(m.hit_tokens for m in metrics) / inputs,
            latency_p50=float(np.percentile(lat, 50)),
            latency_p95=float(np.percentile(lat, 95)),
            ttft_p50=float(np.percentile(ttft, 50)),
            ttft_p95=float(np.percentile(ttft, 95)),
            duration_ms=float(duration),
            throughput=len(metrics) / (duration / 1000.0) if duration > 0 else 0.0,
        )
    if engine is not None:
        s["evictions"] = engine.evictions
        s["eviction_fallbacks"] = sum(getattr(p, "fallbacks", 0) for p in engine.policies)
        s["max_in_flight"] = engine.max_in_flight
    return s


def run(config: SimConfig, record_trace: bool = False, queries=None) -> RunReport:
    """Simulate ``config``; ``queries`` replaces the generated workload when given."""
    return _Engine(config, record_trace, queries).run()


def sweep(configs, jobs: int = 1) -> list:
    """Run independent configs, in order; ``jobs > 1`` fans out to processes."""
    configs = list(configs)
    if jobs <= 1 or len(configs) <= 1:
        return [run(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, configs))


def parse_arm(arm: str) -> tuple[str, str]:
    """``"lbgr+rlt"`` -> ("lbgr", "rlt")."""
    routing, sep, eviction = arm.partition("+")
    if not sep or not routing or not eviction:
        raise ConfigError(f"arm {arm!r} must look like routing+eviction")
    return routing.strip(), canonical_policy(eviction.strip())


def expand_sweep(base: SimConfig, arms=(), seeds=(), rates=(), workers=(), capacities=()):
    """Cartesian product of overrides; yields (labels, config) pairs.

    Arms sharing a seed see the same workload and arrival trace.
    """
    base_d = base.to_dict()
    arm_list = [parse_arm(a) for a in arms] or [(base.routing.get("policy", "lbgr"), base.eviction.get("policy"))]
    for seed in seeds or [None]:
        for rate in rates or [None]:
            for m in workers or [None]:
                for cap in capacities or [None]:
                    for routing, eviction in arm_list:
                        d = json.loads(json.dumps(base_d))
                        if seed is not None:
                            d["workload"]["seed"] = d["eviction"]["seed"] = d["run_seed"] = seed
                        if rate is not None:
                            d["workload"]["rate"] = rate
                        if m is not None:
                            d["workers"] = m
                        if cap is not None:
                            d["capacity"] = cap
                        if routing != d["routing"].get("policy"):
                            d["routing"] = {"policy": routing}
                        d["eviction"]["policy"] = eviction
                        cfg = SimConfig.from_dict(d)
                        labels = {
                            "arm": f"{routing}+{canonical_policy(eviction)}",
                            "seed": cfg.run_seed,
                            "rate": cfg.workload.rate,
                            "workers": cfg.workers,
                            "capacity": cfg.capacity,
                        }
                        yield labels, cfg


def load_sweep(path):
    """Read a sweep file: ``{"base": <config>, "arms": [...], "seeds": [...], ...}``.

    A plain config file is accepted too and yields empty override lists.
    """
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read sweep file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("sweep file must be a JSON object")
    if "base" not in data:
        return SimConfig.from_dict(data), {}
    extra = set(data) - {"base", "arms", "seeds", "rates", "workers", "capacities", "note"}
    if extra:
        raise ConfigError(f"unknown sweep field(s): {', '.join(sorted(extra))}")
    axes = {k: list(data[k]) for k in ("arms", "seeds", "rates", "workers", "capacities") if k in data}
    return SimConfig.from_dict(data["base"]), axes
