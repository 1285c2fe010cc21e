"""Acceptance criteria 1-12; each test prints one PASS/FAIL line via ``record``."""
from __future__ import annotations

import random
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from kvroute.bounds import adversarial_batches, analyse, random_instance, replay, run_bounds
from kvroute.eviction import RandomizedLeafToken, brute_force_min_misses
from kvroute.radix import PrefixKeys, RadixCache
from kvroute.routing import LbgrRouter, LbgrState, pick_min
from kvroute.simulator import SimConfig, expand_sweep, load_sweep, run
from kvroute.types import CostParams, Query, harmonic
from kvroute.workload import generate_workload

ROOT = Path(__file__).resolve().parent.parent
PARAMS = CostParams(0.0, 1.0, 20.0)


def test_criterion_01_single_query_lower_bound(record):
    t0 = time.perf_counter()
    rep = run_bounds("single", 16, 4, policies=["leaf_lru", "opt"], phases=200)
    elapsed = time.perf_counter() - t0
    lru = [m for p, _, _, m in rep.rows if p == "leaf_lru"]
    opt = [m for p, _, _, m in rep.rows if p == "opt"]
    ok = len(lru) == 200 and set(lru) == {13} and set(opt) == {1} and elapsed < 1.0
    record(1, ok, f"L-LRU per-phase {sorted(set(lru))}, OPT {sorted(set(opt))}, {len(lru)} phases, {elapsed:.2f}s")
    assert ok


def test_criterion_02_batch_lower_bound(record):
    rep = run_bounds("batch", 16, 4, beta=2, policies=["leaf_lru", "opt"], phases=200)
    lru = [m for p, _, _, m in rep.rows if p == "leaf_lru"]
    opt = [m for p, _, _, m in rep.rows if p == "opt"]
    ok = len(lru) == 200 and set(lru) == {12} and set(opt) == {1}
    record(2, ok, f"L-LRU per-phase {sorted(set(lru))}, OPT {sorted(set(opt))} at beta=2")
    assert ok


def test_criterion_03_lru_upper_bound(record):
    rng = random.Random(3)
    worst, violations = 0.0, 0
    for _ in range(500):
        capacity, paths = random_instance(rng, max_capacity=8, min_len=2)
        min_len = min(len(p) for p in paths)
        batches = [[p] for p in paths]
        lru = replay(batches, capacity, "leaf_lru").total_misses
        opt = replay(batches, capacity, "opt").total_misses
        ratio = lru / opt
        worst = max(worst, ratio / (capacity - min_len + 2))
        violations += ratio > capacity - min_len + 2
    record(3, violations == 0, f"{violations} violations in 500 instances; worst ratio/bound {worst:.3f}")
    assert violations == 0


def test_criterion_04_rlt_phase_misses(record):
    t0 = time.perf_counter()
    rep = run_bounds("single", 16, 4, policies=["rlt", "opt"], phases=10_000, seed=11)
    elapsed = time.perf_counter() - t0
    s = rep.summary["rlt"]
    target = 1 + (harmonic(14) - 1)
    ok = (
        s["phases"] >= 10_000
        and abs(s["misses_per_phase"] - target) <= 0.10 * target
        and s["ratio"] <= 2 * harmonic(14)
        and elapsed < 10.0
    )
    record(4, ok, f"RLT {s['misses_per_phase']:.4f} misses/phase vs {target:.4f} over {s['phases']} phases, "
                  f"ratio {s['ratio']:.3f} <= {2 * harmonic(14):.3f}, {elapsed:.2f}s")
    assert ok


def test_criterion_05_opt_matches_brute_force(record):
    rng = random.Random(5)
    mismatches = 0
    for _ in range(100):
        capacity, paths = random_instance(rng, max_capacity=5, max_tokens=16)
        best = brute_force_min_misses(capacity, paths)
        mismatches += replay([[p] for p in paths], capacity, "opt").total_misses != best
    record(5, mismatches == 0, f"{mismatches} mismatches in 100 instances")
    assert mismatches == 0


def test_criterion_06_phase_properties(record):
    rng = random.Random(6)
    phase_bound = remiss = opt_bound = 0
    for _ in range(200):
        capacity, paths = random_instance(rng, max_capacity=8, min_len=2)
        min_len = min(len(p) for p in paths)
        ledger, _ = analyse([[p] for p in paths], capacity, ["leaf_lru", "opt"])
        for ph in ledger.phases:
            phase_bound += ph.misses["leaf_lru"] > capacity - min_len + ph.clean
            remiss += ph.old_remisses["leaf_lru"] > 0
        opt_total = sum(ph.misses["opt"] for ph in ledger.phases)
        opt_bound += opt_total < sum(max(ph.clean / 2, 1) for ph in ledger.phases)
    ok = opt_bound == phase_bound == remiss == 0
    record(6, ok, f"violating phases: per-phase L-LRU bound {phase_bound}, old-token re-miss {remiss}; "
                  f"violating instances: summed OPT bound {opt_bound}")
    assert ok


class _AuditedRLT(RandomizedLeafToken):
    def __init__(self, capacity, seed):
        super().__init__(capacity, seed)
        self.problems = []
        self.since_reset = set()
        self.marked_victims = 0

    def observe(self, key):
        self.since_reset.add(key)
        resets = self.resets
        super().observe(key)
        if self.resets != resets:
            if len(self.since_reset) != self.capacity + 1:
                self.problems.append("reset away from the (B+1)-th distinct token")
            self.since_reset = {key}
        elif len(self.since_reset) > self.capacity:
            self.problems.append("missed reset")
        if len(self.marked) > self.capacity:
            self.problems.append("|T| > B")

    def choose_victim(self, leaves, cache):
        unmarked = [k for k in leaves if k not in self.marked]
        v = super().choose_victim(leaves, cache)
        self.marked_victims += v in self.marked
        if unmarked and v in self.marked:
            self.problems.append("marked victim while unmarked leaves exist")
        return v


def _audited_replay(batches, capacity, seed):
    cache = RadixCache(capacity, PrefixKeys())
    pol = _AuditedRLT(capacity, seed)
    for batch in batches:
        for path in batch:
            cache.access_path(path, pol)
        for path in batch:
            cache.release_path(path)
    return pol


def test_criterion_07_rlt_mechanics(record):
    rng = random.Random(7)
    problems = 0
    for i in range(300):
        capacity, paths = random_instance(rng, max_capacity=8, n_paths=25)
        pol = _audited_replay([[p] for p in paths], capacity, i)
        problems += len(pol.problems)
    analytic = {}
    for mode in ("single", "random_tail"):
        batches = adversarial_batches(mode, 16, 4, phases=500, n=20_000, seed=7)
        pol = _audited_replay(batches, 16, 7)
        analytic[mode] = (pol.fallbacks, pol.marked_victims, len(pol.problems))
    ok = problems == 0 and all(v == (0, 0, 0) for v in analytic.values())
    record(7, ok, f"{problems} marking-rule problems on random instances; "
                  f"(fallbacks, marked victims, problems) on analytical replays {analytic}")
    assert ok


def test_criterion_08_lbgr_mechanics(record):
    rng = random.Random(8)
    # decay: rational arithmetic while every product still fits in a double
    decay_ok = True
    for _ in range(50):
        p0 = [float(rng.randrange(1 << 8)) for _ in range(3)]
        st = LbgrState(3, est_load=list(p0))
        r = LbgrRouter(st, PARAMS)
        for k in range(1, 10):
            r.decay_tick()
            want = [Fraction(x) * Fraction(31, 32) ** k for x in p0]
            decay_ok &= [Fraction(x) for x in st.est_load] == want
    # one update strictly reduces the sample's squared error
    update_ok = True
    for _ in range(300):
        st = LbgrState(2, est_load=[rng.uniform(0, 5000), rng.uniform(0, 5000)])
        st.theta = [np.array([rng.uniform(-3, 3) for _ in range(4)]) for _ in range(2)]
        r = LbgrRouter(st, PARAMS)
        n = rng.randint(1, 4000)
        d = r.route(Query(0, tuple(range(n)), (0,)), [rng.randint(0, n), rng.randint(0, n)], [0, 0])
        observed = d.estimates[d.chosen] + rng.choice([-1, 1]) * rng.uniform(0.5, 2000)
        r.on_complete(0, observed)
        after = d.costs[d.chosen] + d.loads[d.chosen] + float(st.theta[d.chosen] @ d.features)
        update_ok &= (observed - after) ** 2 < (observed - d.estimates[d.chosen]) ** 2
    # argmin tie-break and invariance under a common shift
    tie_ok = shift_ok = True
    for _ in range(500):
        vals = [rng.randint(-4, 4) for _ in range(rng.randint(1, 8))]
        tie_ok &= pick_min(vals) == vals.index(min(vals))
        shift = rng.randint(-10**6, 10**6)
        shift_ok &= pick_min([v + shift for v in vals]) == pick_min(vals)
        loads = [float(rng.randint(0, 3000)) for _ in range(4)]
        hits = [rng.randint(0, 50) for _ in range(4)]
        a = LbgrRouter(LbgrState(4, est_load=list(loads)), PARAMS).estimate(Query(0, tuple(range(50)), (0,)), hits)
        shifted = LbgrState(4, est_load=list(loads))
        for t in shifted.theta:
            t[3] = shift
        b = LbgrRouter(shifted, PARAMS).estimate(Query(0, tuple(range(50)), (0,)), hits)
        shift_ok &= a.chosen == b.chosen
    ok = bool(decay_ok and update_ok and tie_ok and shift_ok)
    record(8, ok, f"decay exact {decay_ok}, update reduces error {update_ok}, "
                  f"tie-break {tie_ok}, shift invariance {shift_ok}")
    assert ok


def test_criterion_09_single_worker_hit_rate(record):
    base, axes = load_sweep(ROOT / "configs" / "single_worker_round_robin.json")
    t0 = time.perf_counter()
    ratios = []
    for seed in axes["seeds"]:
        hr = {}
        for labels, cfg in expand_sweep(base, arms=axes["arms"], seeds=[seed]):
            hr[cfg.eviction["policy"]] = run(cfg).summary["hit_rate"]
        ratios.append((seed, hr["leaf_lru"], hr["rlt"]))
    elapsed = time.perf_counter() - t0
    ok = all(rlt >= 2 * lru for _, lru, rlt in ratios) and elapsed < 30.0
    detail = "; ".join(f"seed {s}: L-LRU {lru:.4f} RLT {rlt:.4f} ({rlt / lru:.2f}x)" for s, lru, rlt in ratios)
    record(9, ok, f"{detail}; {elapsed:.1f}s")
    assert ok


def test_criterion_10_multi_worker_ordering(record):
    base, axes = load_sweep(ROOT / "configs" / "multi_worker_gsp.json")
    best, ordering = 0, 0
    for seed in axes["seeds"]:
        summary = {labels["arm"]: run(cfg).summary for labels, cfg in expand_sweep(base, arms=axes["arms"], seeds=[seed])}
        ours, ca = summary["lbgr+rlt"], summary["cache_aware+leaf_lru"]
        ordering += ours["hit_rate"] > ca["hit_rate"] and ours["makespan"] < ca["makespan"]
        best += ours["makespan"] <= min(s["makespan"] for s in summary.values())
    n = len(axes["seeds"])
    ok = ordering == n and best >= 8 and n == 10
    record(10, ok, f"ordering vs Cache-Aware+LRU on {ordering}/{n} seeds; best makespan on {best}/{n} seeds")
    assert ok


def test_criterion_11_coupon_collector_gap(record):
    rep = run_bounds("random_tail", 16, 4, policies=["opt"], n=200_000, seed=11)
    gap, target = rep.extra["opt_mean_gap"], 14 * harmonic(14)
    ok = abs(gap - target) <= 0.10 * target
    record(11, ok, f"mean gap between OPT misses {gap:.2f} vs {target:.2f} (+-10%)")
    assert ok


def test_criterion_12_engine_invariants(record):
    base, _ = load_sweep(ROOT / "configs" / "multi_worker_gsp.json")
    arms = [f"{r}+{e}" for r in ("random", "round_robin", "cache_aware", "lbgr") for e in ("leaf_lru", "rlt")]
    problems = []
    for labels, cfg in expand_sweep(base, arms=arms, seeds=[0, 1]):
        d = cfg.to_dict()
        d["workload"]["group_count"] = 8
        d["beta"] = 2
        d["capacity"] = 2 * 512 + 8
        cfg = SimConfig.from_dict(d)
        a, b = run(cfg), run(cfg)
        qs = {q.id: q for q in generate_workload(cfg.workload)}
        if a.to_json() != b.to_json() or a.to_csv() != b.to_csv():
            problems.append(f"{labels['arm']}: non-deterministic")
        if len(a.metrics) != len(qs):
            problems.append(f"{labels['arm']}: {len(qs)} arrivals, {len(a.metrics)} completions")
        if a.summary["max_in_flight"] > cfg.beta:
            problems.append(f"{labels['arm']}: beta exceeded")
        if sum(m.path_hits + m.path_misses for m in a.metrics) != sum(len(q.path) for q in qs.values()):
            problems.append(f"{labels['arm']}: token accounting")
    ok = not problems
    record(12, ok, f"{2 * len(arms)} runs checked; problems: {problems or 'none'}")
    assert ok
