"""Request routers and the global cache tracker they consult.

Every router exposes ``route(query, hits, pending) -> RoutingDecision`` where
``hits`` is the tracker's per-worker prefix-match estimate for the query input
and ``pending`` is the per-worker count of queued plus in-flight queries.
Routers that keep time-dependent state also implement ``on_complete`` and
``decay_tick``; the others inherit no-op versions.
"""
from __future__ import annotations

import csv
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ConsistencyError
from .radix import AccessOutcome, PrefixKeys, RadixCache
from .types import CostParams, Query

ROUTING_KINDS = ("random", "round_robin", "cache_aware", "lbgr")
UPDATE_RULES = ("normalized", "sgd")


class GlobalTracker:
    """Per-worker shadow trees mirroring the real caches at token level.

    With ``delay=0`` every outcome is replayed immediately (exact mode). A
    positive delay holds back the last ``delay`` outcomes, so routing sees
    a stale view of the caches.
    """

    def __init__(self, workers: int, capacity: int, keys: PrefixKeys | None = None, delay: int = 0):
        if delay < 0:
            raise ConfigError("tracker delay must be >= 0")
        self.keys = keys if keys is not None else PrefixKeys()
        self.shadows = [RadixCache(capacity, self.keys) for _ in range(workers)]
        self.delay = delay
        self._pending: deque = deque()

    @property
    def exact(self) -> bool:
        return self.delay == 0

    def match(self, worker: int, tokens) -> int:
        return self.shadows[worker].match_prefix(tokens)

    def matches(self, tokens) -> list[int]:
        return [s.match_prefix(tokens) for s in self.shadows]

    def apply(self, worker: int, outcome: AccessOutcome, path) -> None:
        self._pending.append((worker, list(outcome.evicted), tuple(path)))
        while len(self._pending) > self.delay:
            self._replay(*self._pending.popleft())

    def flush(self) -> None:
        while self._pending:
            self._replay(*self._pending.popleft())

    def _replay(self, worker, evicted, path) -> None:
        shadow = self.shadows[worker]
        try:
            for key in evicted:
                shadow.evict(key)
            shadow.insert(path)
        except (ValueError, RuntimeError) as exc:
            raise ConsistencyError(f"shadow tree {worker} diverged: {exc}") from exc

    def verify(self, worker: int, cache: RadixCache) -> None:
        if self.exact and self.shadows[worker].contents() != cache.contents():
            raise ConsistencyError(f"shadow tree {worker} does not match its worker cache")


@dataclass
class RoutingDecision:
    query_id: int
    chosen: int
    hits: list  # estimated prefix hits per worker
    estimates: list | None = None  # predicted latency per worker (lbgr only)
    costs: list | None = None  # estimated service cost per worker (lbgr only)
    loads: list | None = None  # estimated load snapshot before the assignment
    features: object = None  # feature vector of the chosen worker
    tick: int = 0


def pick_min(values: Sequence[float]) -> int:
    """Index of the smallest value; ties go to the lowest index."""
    if not values:
        raise ValueError("empty candidate list")
    best = 0
    for i in range(1, len(values)):
        if values[i] < values[best]:
            best = i
    return best


def route_random(rng: random.Random, workers: int) -> int:
    if workers < 1:
        raise ValueError("need at least one worker")
    return rng.randrange(workers)


def route_round_robin(counter: int, workers: int) -> tuple[int, int]:
    """Returns (worker, next counter)."""
    if workers < 1:
        raise ValueError("need at least one worker")
    return counter % workers, counter + 1


def route_cache_aware(hits: Sequence[int], pending: Sequence[int], threshold: float) -> int:
    """Least-pending worker when the queue imbalance exceeds ``threshold``, else best prefix hit."""
    if threshold <= 1:
        raise ConfigError("cache-aware threshold must be > 1")
    if max(pending) > threshold * max(1, min(pending)):
        return pick_min(pending)
    return pick_min([-h for h in hits])


class Router:
    name = "base"
    uses_decay = False

    def route(self, query: Query, hits: Sequence[int], pending: Sequence[int]) -> RoutingDecision:
        raise NotImplementedError

    def on_complete(self, query_id: int, latency: float) -> None:
        pass

    def decay_tick(self) -> None:
        pass


class RandomRouter(Router):
    name = "random"

    def __init__(self, workers: int, seed: int = 0):
        self.workers = workers
        self.rng = random.Random(seed)

    def route(self, query, hits, pending):
        return RoutingDecision(query.id, route_random(self.rng, self.workers), list(hits))


class RoundRobinRouter(Router):
    name = "round_robin"

    def __init__(self, workers: int):
        self.workers = workers
        self.counter = 0

    def route(self, query, hits, pending):
        chosen, self.counter = route_round_robin(self.counter, self.workers)
        return RoutingDecision(query.id, chosen, list(hits))


class CacheAwareRouter(Router):
    name = "cache_aware"

    def __init__(self, threshold: float = 1.5):
        if threshold <= 1:
            raise ConfigError("cache-aware threshold must be > 1")
        self.threshold = threshold

    def route(self, query, hits, pending):
        return RoutingDecision(query.id, route_cache_aware(hits, pending, self.threshold), list(hits))


@dataclass
class LbgrState:
    workers: int
    rho: float = 31 / 32
    delta_t: float = 20.0
    learning_rate: float = 0.008
    update: str = "normalized"
    feature_scale: float = 1000.0
    est_load: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    ticks: int = 0

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("need at least one worker")
        if not (0 < self.rho < 1):
            raise ConfigError("rho must lie in (0, 1)")
        if self.delta_t <= 0 or self.learning_rate < 0 or self.feature_scale <= 0:
            raise ConfigError("delta_t and feature_scale must be > 0, learning_rate >= 0")
        if self.update not in UPDATE_RULES:
            raise ConfigError(f"unknown update rule {self.update!r}")
        if not self.est_load:
            self.est_load = [0.0] * self.workers
        if not self.theta:
            self.theta = [np.zeros(4) for _ in range(self.workers)]

    def features(self, hits: int, input_len: int, load: float) -> np.ndarray:
        s = self.feature_scale
        return np.array([hits / s, (input_len - hits) / s, load / s, 1.0])


class LbgrRouter(Router):
    """Greedy router on predicted latency: analytic cost + decayed load + learned residual."""

    name = "lbgr"
    uses_decay = True

    def __init__(self, state: LbgrState, params: CostParams):
        self.state = state
        self.params = params
        self.outstanding: dict[int, RoutingDecision] = {}

    def estimate(self, query: Query, hits: Sequence[int]) -> RoutingDecision:
        st, p = self.state, self.params
        n = len(query.input)
        costs, preds, feats = [], [], []
        for i in range(st.workers):
            h = min(hits[i], n)
            cost = p.alpha_cached * h + p.alpha_miss * (n - h)
            phi = st.features(h, n, st.est_load[i])
            costs.append(cost)
            feats.append(phi)
            preds.append(cost + st.est_load[i] + float(st.theta[i] @ phi))
        chosen = pick_min(preds)
        decision = RoutingDecision(
            query.id, chosen, list(hits), estimates=preds, costs=costs,
            loads=list(st.est_load), features=feats[chosen], tick=st.ticks,
        )
        st.est_load[chosen] += costs[chosen]
        return decision

    def route(self, query, hits, pending):
        decision = self.estimate(query, hits)
        self.outstanding[query.id] = decision
        return decision

    def on_complete(self, query_id: int, latency: float) -> None:
        decision = self.outstanding.pop(query_id, None)
        if decision is None:
            raise ValueError(f"no outstanding routing decision for query {query_id}")
        st = self.state
        i = decision.chosen
        residual = latency - decision.estimates[i]
        phi = decision.features
        if st.update == "normalized":
            st.theta[i] = st.theta[i] + st.learning_rate * residual * phi / (1.0 + float(phi @ phi))
        else:
            st.theta[i] = st.theta[i] + st.learning_rate * residual * phi
        k = st.ticks - decision.tick
        st.est_load[i] = max(0.0, st.est_load[i] - st.rho ** k * decision.costs[i])

    def decay_tick(self) -> None:
        st = self.state
        st.est_load = [st.rho * x for x in st.est_load]
        st.ticks += 1


def half_life(rho: float, delta_t: float) -> float:
    """Time for the decayed load estimate to halve."""
    return math.log(2) / math.log(1 / rho) * delta_t


def make_router(cfg: dict, workers: int, params: CostParams, seed: int = 0) -> Router:
    cfg = dict(cfg)
    kind = cfg.pop("policy", "lbgr")
    cfg.pop("tracker_delay", None)
    if kind == "random":
        router = RandomRouter(workers, seed)
    elif kind == "round_robin":
        router = RoundRobinRouter(workers)
    elif kind == "cache_aware":
        router = CacheAwareRouter(cfg.pop("threshold", 1.5))
    elif kind == "lbgr":
        try:
            state = LbgrState(workers, **cfg)
        except TypeError as exc:
            raise ConfigError(f"bad lbgr routing options: {exc}") from exc
        return LbgrRouter(state, params)
    else:
        raise ConfigError(f"unknown routing policy {kind!r}")
    if cfg:
        raise ConfigError(f"unknown {kind} routing option(s): {', '.join(sorted(cfg))}")
    return router


def write_trace(decisions: Sequence[RoutingDecision], fh, workers: int) -> None:
    """One CSV row per routing decision."""
    w = csv.writer(fh, lineterminator="\n")
    header = ["query_id", "chosen"]
    for i in range(workers):
        header += [f"est_{i}", f"hits_{i}", f"load_{i}"]
    w.writerow(header)
    for d in decisions:
        row = [d.query_id, d.chosen]
        for i in range(workers):
            row += [
                "" if d.estimates is None else round(d.estimates[i], 6),
                d.hits[i],
                "" if d.loads is None else round(d.loads[i], 6),
            ]
        w.writerow(row)
