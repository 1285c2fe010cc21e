from __future__ import annotations

import random

import pytest
from hypothesis import given, strategies as st

from kvroute.bounds import adversarial_batches, analyse, random_instance, replay
from kvroute.errors import ConfigError, ConsistencyError
from kvroute.eviction import (
    Belady,
    LeafLRU,
    RandomizedLeafToken,
    brute_force_min_misses,
    canonical_policy,
    lru_victim,
    make_policy,
    partition_phases,
)
from kvroute.radix import PrefixKeys, RadixCache


def test_lru_victim():
    assert lru_victim(["a", "b"], {"a": 5, "b": 2}) == "b"
    assert lru_victim([7, 3, 9], {7: 1, 3: 1, 9: 1}) == 3
    with pytest.raises(ValueError):
        lru_victim([], {})


def test_policy_names():
    assert canonical_policy("LRU") == "leaf_lru"
    assert canonical_policy("belady") == "opt"
    with pytest.raises(ConfigError):
        canonical_policy("fifo")
    with pytest.raises(ConfigError):
        make_policy("opt", 4)


def test_rlt_reset_trace():
    # B=2: x, y marked; marking z is the third distinct token and resets T to {z}
    keys = PrefixKeys()
    x, y, z = keys.child(0, 1), keys.child(0, 2), keys.child(0, 3)
    cache = RadixCache(2, keys)
    pol = RandomizedLeafToken(2, seed=0)
    cache.access_path([1], pol)
    cache.release_path([1])
    cache.access_path([2], pol)
    cache.release_path([2])
    assert pol.marked == {x, y}
    out = cache.access_path([3], pol)
    assert pol.marked == {z}
    assert pol.resets == 1
    assert out.evicted[0] in {x, y}
    assert pol.fallbacks == 0


def test_rlt_victims_are_uniform_over_unmarked():
    counts = {}
    for seed in range(600):
        pol = RandomizedLeafToken(capacity=3, seed=seed)
        pol.marked = {3}
        v = pol.choose_victim([1, 2, 3], cache=None)
        counts[v] = counts.get(v, 0) + 1
    assert 3 not in counts
    assert abs(counts[1] - counts[2]) < 90


def test_rlt_fallback_is_lru_among_marked():
    cache = RadixCache(2)
    cache.last_access.update({5: 9, 6: 4})
    pol = RandomizedLeafToken(2, seed=0)
    pol.marked = {5, 6}
    assert pol.choose_victim([5, 6], cache) == 6
    assert pol.fallbacks == 1


class CheckedRLT(RandomizedLeafToken):
    """Records every decision so the marking rules can be checked after the fact."""

    def __init__(self, capacity, seed):
        super().__init__(capacity, seed)
        self.violations = []
        self.max_marked = 0
        self.distinct_since_reset = set()

    def observe(self, key):
        self.distinct_since_reset.add(key)
        before = self.resets
        super().observe(key)
        if self.resets != before:
            if len(self.distinct_since_reset) != self.capacity + 1:
                self.violations.append("reset at wrong count")
            self.distinct_since_reset = {key}
        elif len(self.distinct_since_reset) > self.capacity:
            self.violations.append("missed reset")
        self.max_marked = max(self.max_marked, len(self.marked))

    def choose_victim(self, leaves, cache):
        v = super().choose_victim(leaves, cache)
        if v in self.marked and any(k not in self.marked for k in leaves):
            self.violations.append("marked victim while unmarked leaves exist")
        if v not in leaves:
            self.violations.append("victim not a leaf")
        return v


@given(st.integers(0, 10_000), st.integers(0, 1000))
def test_rlt_marking_rules(instance_seed, policy_seed):
    capacity, paths = random_instance(random.Random(instance_seed), max_capacity=8, n_paths=25)
    keys = PrefixKeys()
    cache = RadixCache(capacity, keys)
    pol = CheckedRLT(capacity, policy_seed)
    for p in paths:
        cache.access_path(p, pol)
        cache.release_path(p)
    assert pol.violations == []
    assert pol.max_marked <= capacity


@pytest.mark.parametrize("mode", ["single", "random_tail"])
def test_rlt_never_falls_back_on_adversarial_replays(mode):
    batches = adversarial_batches(mode, 16, 4, phases=300, n=5000, seed=2)
    assert replay(batches, 16, "rlt", seed=9).fallbacks == 0


def test_belady_prefers_never_used_again():
    keys = PrefixKeys()
    a, b, c = (keys.child(0, t) for t in (1, 2, 3))
    pol = Belady([a, b, c] + [c] * 6 + [a])
    for k in (a, b, c):
        pol.observe(k)
    assert pol.next_use(a) == 9
    assert pol.choose_victim([a, b], None) == b
    pol2 = Belady([a, b])
    pol2.observe(a)
    pol2.observe(b)
    assert pol2.choose_victim([b, a], None) == a  # both never again: smallest key


def test_belady_rejects_unregistered_access():
    pol = Belady([1, 2])
    pol.observe(1)
    with pytest.raises(ConsistencyError):
        pol.observe(3)


def test_brute_force_no_eviction():
    assert brute_force_min_misses(6, [(1, 2, 3), (1, 2, 4), (1, 5)]) == 5


def test_brute_force_limits():
    with pytest.raises(ValueError):
        brute_force_min_misses(7, [(1,)])
    with pytest.raises(ValueError):
        brute_force_min_misses(4, [(1, 2, 3, 4)] * 6)


def test_brute_force_matches_opt_on_small_adversarial_loop():
    # B=4, L=2: four paths sharing one prefix token, two full cycles
    batches = adversarial_batches("single", 4, 2, phases=1)
    paths = [p for b in batches for p in b][:8]
    ledger, runs = analyse([[p] for p in paths], 4, ["opt"])
    assert ledger.phases[1].misses["opt"] == 1
    assert brute_force_min_misses(4, paths) == runs["opt"].total_misses


def test_brute_force_dominates_every_policy():
    rng = random.Random(77)
    for _ in range(100):
        capacity, paths = random_instance(rng, max_capacity=5, max_tokens=16)
        best = brute_force_min_misses(capacity, paths)
        batches = [[p] for p in paths]
        for kind in ("leaf_lru", "rlt", "opt"):
            assert best <= replay(batches, capacity, kind, seed=3).total_misses


def test_partition_examples():
    led = partition_phases(3, [1, 2, 3, 4, 5, 6])
    assert [set(p.distinct) for p in led.phases] == [{1, 2, 3}, {4, 5, 6}]
    led = partition_phases(3, [1, 2, 1, 2, 3, 4])
    assert (led.phases[0].start, led.phases[0].end) == (0, 5)
    assert led.phases[1].start == 5


@given(st.integers(1, 6), st.lists(st.integers(0, 9), max_size=60))
def test_partition_property(capacity, seq):
    led = partition_phases(capacity, seq)
    assert sum(p.end - p.start for p in led.phases) == len(seq)
    for p in led.phases[:-1]:
        assert len(p.distinct) == capacity
        assert p.distinct == frozenset(seq[p.start:p.end])
    if led.phases:
        assert len(led.phases[-1].distinct) <= capacity


def test_lru_phase_bound_counterexample():
    # A phase that opens mid-path: its parent is pinned, so the only leaf to
    # evict is a token the phase reads next. Two misses with one clean token.
    paths = [(3, 1), (3, 2), (3, 3), (3, 3), (3, 3), (3, 2), (1, 0), (3, 3)]
    ledger, runs = analyse([[p] for p in paths], 2, ["leaf_lru", "opt"])
    ph = ledger.phases[4]
    assert (ph.clean, ph.misses["leaf_lru"], ph.misses["opt"]) == (1, 2, 2)
    assert ph.old_remisses["leaf_lru"] == 0
