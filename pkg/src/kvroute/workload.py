"""Synthetic workload generation.

Token ids come from a per-workload counter, so two queries share a token
only where the workload structure says they share a prefix.
"""
from __future__ import annotations

import itertools
import json
import random
from pathlib import Path

from .errors import ConfigError
from .types import Query, WorkloadSpec, shared_prefix_len


class _Fresh:
    def __init__(self):
        self._counter = itertools.count()

    def __call__(self, n: int) -> tuple:
        return tuple(next(self._counter) for _ in range(n))


def generate_workload(spec: WorkloadSpec) -> list[Query]:
    """Build the query list for ``spec``; ids follow arrival order."""
    spec.validate()
    rng = random.Random(spec.seed)
    fresh = _Fresh()

    if spec.kind == "gsp_shared_prefix":
        slots = _order(_gsp_groups(spec, fresh), spec.arrival, rng, keep_group_order=False)
    elif spec.kind == "multi_turn":
        slots = _order(_multi_turn_groups(spec, fresh), spec.arrival, rng, keep_group_order=True)
    elif spec.kind == "long_doc_qa":
        slots = _order(_doc_qa_groups(spec, fresh), spec.arrival, rng, keep_group_order=False)
    else:
        slots = _adversarial_slots(spec, fresh, rng)

    times = _arrival_times(len(slots), spec.rate, rng)
    queries = []
    for slot, t in zip(slots, times):
        for group, inp, out in slot:
            queries.append(Query(id=len(queries), input=inp, output=out, arrival_time=t, group=group))
    return queries


def _gsp_groups(spec, fresh):
    groups = []
    for g in range(spec.group_count):
        length = spec.length_cycle[g % len(spec.length_cycle)]
        prefix = fresh(shared_prefix_len(spec.prefix_ratio, length))
        groups.append(
            [(prefix + fresh(length - len(prefix)), fresh(spec.output_len)) for _ in range(spec.queries_per_group)]
        )
    return groups


def _multi_turn_groups(spec, fresh):
    # each round resends the whole conversation so far plus a new user turn
    groups = []
    for c in range(spec.group_count):
        rounds = spec.rounds_cycle[c % len(spec.rounds_cycle)]
        history: tuple = ()
        convo = []
        for _ in range(rounds):
            inp = history + fresh(spec.turn_len)
            out = fresh(spec.output_len)
            convo.append((inp, out))
            history = inp + out
        groups.append(convo)
    return groups


def _doc_qa_groups(spec, fresh):
    groups = []
    for d in range(spec.group_count):
        doc = fresh(spec.length_cycle[d % len(spec.length_cycle)])
        groups.append(
            [(doc + fresh(spec.question_len), fresh(spec.output_len)) for _ in range(spec.queries_per_group)]
        )
    return groups


def _order(groups, arrival, rng, keep_group_order):
    """Flatten per-group query lists into single-query arrival slots."""
    if arrival == "fixed_order":
        return [[(g, inp, out)] for g, qs in enumerate(groups) for inp, out in qs]
    if arrival == "round_robin_order":
        slots = []
        for k in range(max(len(qs) for qs in groups)):
            for g, qs in enumerate(groups):
                if k < len(qs):
                    slots.append([(g, *qs[k])])
        return slots
    # random order; conversations keep their turn order
    if keep_group_order:
        owners = [g for g, qs in enumerate(groups) for _ in qs]
        rng.shuffle(owners)
        nxt = [0] * len(groups)
        slots = []
        for g in owners:
            slots.append([(g, *groups[g][nxt[g]])])
            nxt[g] += 1
        return slots
    slots = [[(g, inp, out)] for g, qs in enumerate(groups) for inp, out in qs]
    rng.shuffle(slots)
    return slots


def adversarial_paths(capacity: int, min_len: int, fresh=None) -> list[tuple[tuple, tuple]]:
    """``capacity - min_len + 2`` paths sharing ``min_len - 1`` tokens, one distinct tail each.

    Returned as (input, output) pairs: the shared prefix is the input and the
    tail token is the single output token.
    """
    fresh = fresh or _Fresh()
    prefix = fresh(min_len - 1)
    return [(prefix, fresh(1)) for _ in range(capacity - min_len + 2)]


def _adversarial_slots(spec, fresh, rng):
    paths = adversarial_paths(spec.capacity, spec.min_len, fresh)
    if spec.kind == "adversarial_single":
        return [[(k, *paths[k])] for _ in range(spec.cycles) for k in range(len(paths))]
    if spec.kind == "adversarial_batch":
        beta = spec.batch
        batches = [list(range(beta - 1)) + [u + beta - 2] for u in range(1, len(paths) - beta + 2)]
        return [[(k, *paths[k]) for k in b] for _ in range(spec.cycles) for b in batches]
    picks = [rng.randrange(len(paths)) for _ in range(spec.n)]
    return [[(k, *paths[k])] for k in picks]


def _arrival_times(n: int, rate: float, rng) -> list[int]:
    """Integer-ms slot times; Poisson gaps at ``rate`` req/s, else one slot per ms."""
    if rate <= 0:
        return list(range(n))
    times, t = [], 0.0
    for k in range(n):
        if k:
            t += rng.expovariate(rate / 1000.0)
        times.append(round(t))
    return times


def make_adversarial_single(capacity: int, min_len: int, cycles: int = 1) -> WorkloadSpec:
    spec = WorkloadSpec(
        kind="adversarial_single", capacity=capacity, min_len=min_len, cycles=cycles,
        arrival="fixed_order", rate=0.0, output_len=1,
    )
    spec.validate()
    return spec


def make_adversarial_batch(capacity: int, min_len: int, batch: int, cycles: int = 1) -> WorkloadSpec:
    if batch == 1:
        return make_adversarial_single(capacity, min_len, cycles)
    spec = WorkloadSpec(
        kind="adversarial_batch", capacity=capacity, min_len=min_len, batch=batch, cycles=cycles,
        arrival="fixed_order", rate=0.0, output_len=1,
    )
    spec.validate()
    return spec


def make_adversarial_random_tail(capacity: int, min_len: int, n: int, seed: int = 0) -> WorkloadSpec:
    spec = WorkloadSpec(
        kind="adversarial_random_tail", capacity=capacity, min_len=min_len, n=n, seed=seed,
        arrival="fixed_order", rate=0.0, output_len=1,
    )
    spec.validate()
    return spec


def group_batches(queries: list[Query]) -> list[list[Query]]:
    """Split queries into batches of simultaneous arrivals (consecutive equal arrival_time)."""
    batches: list[list[Query]] = []
    for q in queries:
        if batches and batches[-1][0].arrival_time == q.arrival_time:
            batches[-1].append(q)
        else:
            batches.append([q])
    return batches


def load_workload_spec(path) -> WorkloadSpec:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read workload config {path}: {exc}") from exc
    if "workload" in data and isinstance(data["workload"], dict):
        data = data["workload"]
    spec = WorkloadSpec.from_dict(data)
    spec.validate()
    return spec
