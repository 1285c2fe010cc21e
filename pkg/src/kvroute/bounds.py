"""Replay harness for the competitive-ratio bounds.

Replays batches of token paths through a single :class:`RadixCache`, keeps
per-access hit/miss flags, and splits the flattened access stream into
phases so per-phase misses and clean counts can be compared with the
analytical bounds.
"""
from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ConfigError
from .eviction import canonical_policy, make_policy, partition_phases
from .radix import PrefixKeys, RadixCache
from .types import harmonic
from .workload import (
    generate_workload,
    group_batches,
    make_adversarial_batch,
    make_adversarial_random_tail,
    make_adversarial_single,
)


@dataclass
class Replay:
    policy: str
    keys: list  # flattened node-key access sequence
    misses: list  # per-access miss flags
    path_misses: list  # misses per path, in flattened path order
    snapshots: dict = field(default_factory=dict)
    fallbacks: int = 0

    @property
    def total_misses(self) -> int:
        return sum(self.misses)


def flatten(batches: Sequence[Sequence[Sequence[int]]], keys: PrefixKeys) -> list[int]:
    return [k for batch in batches for path in batch for k in keys.path(path)]


def replay(
    batches: Sequence[Sequence[Sequence[int]]],
    capacity: int,
    policy: str,
    seed: int = 0,
    snapshot_at: Sequence[int] = (),
    reject_duplicates: bool = False,
) -> Replay:
    """Process each batch as concurrently in-flight paths, then release them.

    A batch of one path is single-query processing. Paths inside a batch are
    accessed in order and stay pinned until the whole batch completes.
    """
    keys = PrefixKeys()
    future = flatten(batches, keys)
    pol = make_policy(policy, capacity, seed=seed, future=future)
    cache = RadixCache(capacity, keys)
    wanted = set(snapshot_at)
    snaps: dict[int, frozenset] = {}
    pos = 0

    def on_token(key):
        nonlocal pos
        if pos in wanted:
            snaps[pos] = cache.contents()
        pos += 1

    flags: list[bool] = []
    per_path: list[int] = []
    for batch in batches:
        if reject_duplicates and len({tuple(p) for p in batch}) != len(batch):
            raise ConfigError("batch contains duplicate paths")
        for path in batch:
            out = cache.access_path(path, pol, on_token)
            # hits are always a prefix of the path: a loaded token has no cached children
            flags.extend([False] * out.hits)
            flags.extend([True] * out.misses)
            per_path.append(out.misses)
        for path in batch:
            cache.release_path(path)
    return Replay(
        policy=canonical_policy(policy),
        keys=future,
        misses=flags,
        path_misses=per_path,
        snapshots=snaps,
        fallbacks=getattr(pol, "fallbacks", 0),
    )


def analyse(batches, capacity: int, policies: Sequence[str], seed: int = 0, reject_duplicates: bool = False):
    """Replay every policy and attach misses and L-LRU clean counts to one phase ledger."""
    keys = PrefixKeys()
    ledger = partition_phases(capacity, flatten(batches, keys))
    starts = [ph.start for ph in ledger.phases]
    runs = {}
    for name in policies:
        kind = canonical_policy(name)
        rep = replay(batches, capacity, kind, seed=seed, snapshot_at=starts, reject_duplicates=reject_duplicates)
        ledger.record_misses(kind, rep.misses, rep.keys)
        runs[kind] = rep
    if "leaf_lru" in runs:
        ledger.classify_clean(runs["leaf_lru"].snapshots)
    return ledger, runs


def steady_phases(ledger, count: int | None = None) -> list:
    """Complete phases after the first (cold-start) phase."""
    phases = [p for p in ledger.complete_phases() if p.index > 0]
    return phases if count is None else phases[:count]


@dataclass
class BoundsReport:
    mode: str
    capacity: int
    min_len: int
    beta: int
    rows: list  # (policy, phase, clean, misses)
    summary: dict  # policy -> {misses_per_phase, ratio, ...}
    predictions: dict
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "policy", "phase", "clean", "misses", "misses_per_phase", "ratio_vs_opt", "predicted"])
        for policy, phase, clean, misses in self.rows:
            w.writerow(["phase", policy, phase, clean, misses, "", "", ""])
        for policy, s in self.summary.items():
            w.writerow([
                "summary", policy, s["phases"], "", s["misses"], _fmt(s["misses_per_phase"]),
                _fmt(s.get("ratio")), _fmt(self.predictions.get(policy)),
            ])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"mode={self.mode} B={self.capacity} L={self.min_len} beta={self.beta}"]
        lines.append(f"{'policy':<10}{'phases':>8}{'misses/phase':>14}{'ratio':>10}{'predicted':>12}")
        for policy, s in self.summary.items():
            lines.append(
                f"{policy:<10}{s['phases']:>8}{_fmt(s['misses_per_phase']):>14}"
                f"{_fmt(s.get('ratio')):>10}{_fmt(self.predictions.get(policy)):>12}"
            )
        for k, v in self.extra.items():
            lines.append(f"{k}: {_fmt(v)}")
        return "\n".join(lines)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def adversarial_batches(mode: str, capacity: int, min_len: int, beta: int = 1, phases: int = 200,
                        n: int = 0, seed: int = 0):
    if mode == "single":
        per_phase, per_cycle = capacity - min_len + 1, capacity - min_len + 2
        spec = make_adversarial_single(capacity, min_len, cycles=(phases + 3) * per_phase // per_cycle + 2)
    elif mode == "batch":
        per_phase, per_cycle = capacity - min_len - beta + 2, capacity - min_len - beta + 3
        spec = make_adversarial_batch(capacity, min_len, beta, cycles=(phases + 3) * per_phase // per_cycle + 2)
    elif mode == "random_tail":
        spec = make_adversarial_random_tail(capacity, min_len, n, seed)
    else:
        raise ConfigError(f"unknown bounds mode {mode!r}")
    return [[q.path for q in b] for b in group_batches(generate_workload(spec))]


def predictions(mode: str, capacity: int, min_len: int, beta: int = 1) -> dict:
    """Analytical per-phase miss predictions for the adversarial constructions."""
    span = capacity - min_len + 2
    if mode == "random_tail":
        # per-phase counts are not fixed here; only the coupon-collector gap is
        return {"opt_gap": span * harmonic(span)}
    if mode == "batch":
        lru = capacity - min_len - beta + 2
    else:
        lru = capacity - min_len + 1
    # one clean token per steady phase: c + c(H_n - H_c) with n = min(B - L + c, B)
    n = min(capacity - min_len - (beta - 1) + 1, capacity)
    return {
        "leaf_lru": float(lru),
        "opt": 1.0,
        "rlt": 1 + (harmonic(n) - harmonic(1)),
        "opt_gap": span * harmonic(span),
    }


def run_bounds(mode: str, capacity: int, min_len: int, beta: int = 1,
               policies: Sequence[str] = ("leaf_lru", "rlt", "opt"), phases: int = 200,
               n: int = 20000, seed: int = 0) -> BoundsReport:
    if not (2 <= min_len <= capacity):
        raise ConfigError("bounds need 2 <= min_len <= capacity")
    if mode == "batch" and (beta < 1 or beta * min_len > capacity):
        raise ConfigError("batch mode needs beta * min_len <= capacity")
    policies = [canonical_policy(p) for p in policies]
    if "opt" not in policies:
        policies.append("opt")
    batches = adversarial_batches(mode, capacity, min_len, beta, phases, n, seed)
    ledger, runs = analyse(batches, capacity, policies, seed=seed, reject_duplicates=(mode == "batch"))
    steady = steady_phases(ledger, None if mode == "random_tail" else phases)
    if not steady:
        raise ConfigError("workload too short for a steady-state phase")
    rows, summary = [], {}
    opt_total = sum(p.misses["opt"] for p in steady)
    for name in policies:
        total = sum(p.misses[name] for p in steady)
        rows.extend((name, p.index, p.clean, p.misses[name]) for p in steady)
        summary[name] = {
            "phases": len(steady),
            "misses": total,
            "misses_per_phase": total / len(steady),
            "ratio": total / opt_total if opt_total else math.inf,
            "min_phase_misses": min(p.misses[name] for p in steady),
            "max_phase_misses": max(p.misses[name] for p in steady),
            "fallbacks": runs[name].fallbacks,
        }
    report = BoundsReport(mode, capacity, min_len, beta if mode == "batch" else 1, rows, summary,
                          predictions(mode, capacity, min_len, beta if mode == "batch" else 1))
    if mode == "random_tail":
        report.extra["opt_mean_gap"] = mean_miss_gap(runs["opt"].path_misses, capacity - min_len + 1)
        report.extra["opt_gap_predicted"] = report.predictions["opt_gap"]
        for name in policies:
            warm = runs[name].path_misses[capacity - min_len + 1:]
            report.extra[f"{name}_miss_rate"] = sum(1 for m in warm if m) / max(1, len(warm))
        report.extra["miss_rate_lower_bound"] = 1 / (capacity - min_len + 2)
    return report


def mean_miss_gap(path_misses: Sequence[int], warmup: int) -> float:
    """Mean number of path-queries between consecutive missing queries after warm-up."""
    idx = [i for i, m in enumerate(path_misses) if m and i >= warmup]
    if len(idx) < 2:
        return math.inf
    return (idx[-1] - idx[0]) / (len(idx) - 1)


def random_instance(rng: random.Random, max_capacity: int = 8, max_tokens: int | None = None,
                    n_paths: int = 12, min_len: int = 2):
    """A random single-query instance ``(capacity, paths)`` over a small shared-prefix tree.

    Paths come from a few templates over a tiny alphabet so prefixes collide
    often. Every path has at least ``min_len`` tokens and fits in the cache.
    """
    capacity = rng.randint(max(2, min_len), max_capacity)
    alphabet = rng.randint(2, 4)
    top = capacity if max_tokens is None else min(capacity, max_tokens)
    templates = [
        tuple(rng.randrange(alphabet) for _ in range(rng.randint(min_len, top)))
        for _ in range(rng.randint(2, 5))
    ]
    paths, used = [], 0
    for _ in range(n_paths):
        p = rng.choice(templates)
        if max_tokens is not None and used + len(p) > max_tokens:
            break
        paths.append(p)
        used += len(p)
    return capacity, paths
