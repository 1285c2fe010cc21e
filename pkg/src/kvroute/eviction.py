"""Leaf-token eviction policies and the phase bookkeeping used to analyse them."""
from __future__ import annotations

import math
import random
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

from .errors import ConfigError, ConsistencyError
from .radix import PrefixKeys

POLICY_KINDS = ("leaf_lru", "rlt", "opt")
_ALIASES = {"lru": "leaf_lru", "l-lru": "leaf_lru", "belady": "opt"}


def canonical_policy(name: str) -> str:
    kind = _ALIASES.get(name.lower(), name.lower())
    if kind not in POLICY_KINDS:
        raise ConfigError(f"unknown eviction policy {name!r}")
    return kind


def lru_victim(leaves: Sequence[int], last_access) -> int:
    """Least recently used leaf; ties go to the smallest node key."""
    if not leaves:
        raise ValueError("no leaf to evict")
    return min(leaves, key=lambda k: (last_access[k], k))


class LeafLRU:
    name = "leaf_lru"

    def __init__(self):
        self.choices = 0

    def observe(self, key: int) -> None:
        pass

    def choose_victim(self, leaves, cache) -> int:
        self.choices += 1
        return lru_victim(leaves, cache.last_access)


class RandomizedLeafToken:
    """Marking-based randomized eviction over leaf tokens.

    Every accessed token is marked; when the (capacity + 1)-th distinct token
    is marked the marks are cleared except for that token. Victims are drawn
    uniformly from the unmarked unpinned leaves. If every candidate leaf is
    marked, the least recently used marked leaf is evicted and ``fallbacks``
    is incremented.
    """

    name = "rlt"

    def __init__(self, capacity: int, seed: int = 0):
        self.capacity = capacity
        self.marked: set[int] = set()
        self.rng = random.Random(seed)
        self.fallbacks = 0
        self.resets = 0
        self.choices = 0

    def observe(self, key: int) -> None:
        marked = self.marked
        marked.add(key)
        if len(marked) == self.capacity + 1:
            self.marked = {key}
            self.resets += 1

    def choose_victim(self, leaves, cache) -> int:
        if not leaves:
            raise ValueError("no leaf to evict")
        self.choices += 1
        marked = self.marked
        candidates = sorted(k for k in leaves if k not in marked)
        if candidates:
            return candidates[self.rng.randrange(len(candidates))]
        self.fallbacks += 1
        return lru_victim(leaves, cache.last_access)


class Belady:
    """Clairvoyant policy: evict the leaf whose next access is furthest away.

    ``future`` is the full node-key access sequence in the order the cache
    will see it. Ties (including never-used-again) go to the smallest key.
    """

    name = "opt"

    def __init__(self, future: Sequence[int]):
        self.future = list(future)
        self._positions: dict[int, list[int]] = defaultdict(list)
        for pos, key in enumerate(self.future):
            self._positions[key].append(pos)
        self.cursor = -1
        self.choices = 0

    def observe(self, key: int) -> None:
        self.cursor += 1
        if self.cursor >= len(self.future) or self.future[self.cursor] != key:
            raise ConsistencyError(f"access {self.cursor} does not match the registered future")

    def next_use(self, key: int) -> float:
        positions = self._positions.get(key)
        if not positions:
            return math.inf
        i = bisect_right(positions, self.cursor)
        return positions[i] if i < len(positions) else math.inf

    def choose_victim(self, leaves, cache) -> int:
        if not leaves:
            raise ValueError("no leaf to evict")
        self.choices += 1
        return max(leaves, key=lambda k: (self.next_use(k), -k))


def make_policy(kind: str, capacity: int, seed: int = 0, future: Sequence[int] | None = None):
    kind = canonical_policy(kind)
    if kind == "leaf_lru":
        return LeafLRU()
    if kind == "rlt":
        return RandomizedLeafToken(capacity, seed)
    if future is None:
        raise ConfigError("opt needs the full future access sequence")
    return Belady(future)


BRUTE_FORCE_MAX_CAPACITY = 6
BRUTE_FORCE_MAX_TOKENS = 20


def brute_force_min_misses(capacity: int, paths: Sequence[Sequence[int]]) -> int:
    """Exact minimum misses over every leaf-eviction schedule, single-query processing.

    Exhaustive search memoised on (position, cache contents). On a miss with a
    full cache any leaf may be evicted except the parent of the token being
    loaded (the rest of the current path is internal).
    """
    total = sum(len(p) for p in paths)
    if capacity > BRUTE_FORCE_MAX_CAPACITY or total > BRUTE_FORCE_MAX_TOKENS:
        raise ValueError(
            f"brute force limited to capacity <= {BRUTE_FORCE_MAX_CAPACITY} "
            f"and <= {BRUTE_FORCE_MAX_TOKENS} tokens (got {capacity}, {total})"
        )
    keys = PrefixKeys()
    seq = [k for p in paths for k in keys.path(p)]
    parent = keys.parent

    @lru_cache(maxsize=None)
    def solve(i: int, cache: frozenset) -> float:
        if i == len(seq):
            return 0
        key = seq[i]
        if key in cache:
            return solve(i + 1, cache)
        if len(cache) < capacity:
            return 1 + solve(i + 1, cache | {key})
        internal = {parent[k] for k in cache}
        best = math.inf
        for victim in cache:
            if victim in internal or victim == parent[key]:
                continue
            best = min(best, solve(i + 1, (cache - {victim}) | {key}))
        return 1 + best

    result = solve(0, frozenset())
    if math.isinf(result):
        raise ValueError("no feasible schedule (a path is longer than the cache)")
    return int(result)


@dataclass
class Phase:
    index: int
    start: int
    end: int  # exclusive
    distinct: frozenset
    clean: int | None = None
    misses: dict = field(default_factory=dict)
    old_remisses: dict = field(default_factory=dict)


@dataclass
class PhaseLedger:
    capacity: int
    phases: list

    def complete_phases(self) -> list:
        """Phases holding exactly ``capacity`` distinct tokens."""
        return [p for p in self.phases if len(p.distinct) == self.capacity]

    def record_misses(self, name: str, miss_flags: Sequence[bool], keys: Sequence[int]) -> None:
        """Attach per-phase miss counts, plus re-misses of tokens already seen in the phase."""
        for ph in self.phases:
            seen, misses, remisses = set(), 0, 0
            for pos in range(ph.start, ph.end):
                if miss_flags[pos]:
                    misses += 1
                    if keys[pos] in seen:
                        remisses += 1
                seen.add(keys[pos])
            ph.misses[name] = misses
            ph.old_remisses[name] = remisses

    def classify_clean(self, snapshots: dict) -> None:
        """Clean count per phase: distinct tokens not cached when the phase began.

        ``snapshots`` maps a phase start position to the cache contents just
        before that access.
        """
        for ph in self.phases:
            ph.clean = len(ph.distinct - snapshots.get(ph.start, frozenset()))


def partition_phases(capacity: int, sequence: Sequence[int]) -> PhaseLedger:
    """Greedy left-to-right split into phases of ``capacity`` distinct tokens."""
    phases: list[Phase] = []
    start, seen = 0, set()
    for pos, key in enumerate(sequence):
        if key not in seen and len(seen) == capacity:
            phases.append(Phase(len(phases), start, pos, frozenset(seen)))
            start, seen = pos, set()
        seen.add(key)
    if seen:
        phases.append(Phase(len(phases), start, len(sequence), frozenset(seen)))
    return PhaseLedger(capacity, phases)
