"""Shared vocabulary: token paths, queries, cost parameters, workload specs, metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

# A token is a plain non-negative int; a path is a tuple of them.
TokenPath = tuple

WORKLOAD_KINDS = (
    "gsp_shared_prefix",
    "multi_turn",
    "long_doc_qa",
    "adversarial_single",
    "adversarial_batch",
    "adversarial_random_tail",
)
ADVERSARIAL_KINDS = WORKLOAD_KINDS[3:]
ARRIVAL_MODES = ("poisson", "round_robin_order", "fixed_order")


@dataclass(frozen=True)
class Query:
    id: int
    input: tuple
    output: tuple
    arrival_time: int = 0
    group: int = 0

    def __post_init__(self):
        if len(self.input) < 1 or len(self.output) < 1:
            raise ValueError(f"query {self.id}: input and output must both be non-empty")
        if self.arrival_time < 0:
            raise ValueError(f"query {self.id}: negative arrival time")

    @property
    def path(self) -> tuple:
        """Complete token path: input followed by output."""
        return self.input + self.output

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "group": self.group,
            "arrival_time": self.arrival_time,
            "input": list(self.input),
            "output": list(self.output),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Query:
        return cls(
            id=d["id"],
            input=tuple(d["input"]),
            output=tuple(d["output"]),
            arrival_time=d.get("arrival_time", 0),
            group=d.get("group", 0),
        )


@dataclass(frozen=True)
class CostParams:
    """Per-token time costs in milliseconds.

    The defaults are 0 ms for a cached token and 1000 ms per 1k uncached
    tokens. ``output_cost_per_token`` is the simulator's decode cost.
    """

    alpha_cached: float = 0.0
    alpha_miss: float = 1.0
    output_cost_per_token: float = 20.0

    def __post_init__(self):
        if not (self.alpha_miss >= self.alpha_cached >= 0):
            raise ConfigError("cost params need alpha_miss >= alpha_cached >= 0")
        if self.output_cost_per_token < 0:
            raise ConfigError("output_cost_per_token must be >= 0")


@dataclass
class WorkloadSpec:
    kind: str = "gsp_shared_prefix"
    group_count: int = 16
    queries_per_group: int = 8
    prefix_ratio: float = 0.5
    length_cycle: list = field(default_factory=lambda: [32, 64, 128, 256, 512])
    arrival: str = "poisson"
    rate: float = 12.0
    seed: int = 0
    output_len: int = 4
    # multi_turn
    rounds_cycle: list = field(default_factory=lambda: [2, 4, 6, 8])
    turn_len: int = 64
    # long_doc_qa; question length is an implementer constant
    question_len: int = 16
    # adversarial constructions
    capacity: int = 16
    min_len: int = 4
    batch: int = 1
    cycles: int = 1
    n: int = 0

    def validate(self) -> None:
        if self.kind not in WORKLOAD_KINDS:
            raise ConfigError(f"unknown workload kind {self.kind!r}")
        if self.arrival not in ARRIVAL_MODES:
            raise ConfigError(f"unknown arrival mode {self.arrival!r}")
        if self.rate < 0:
            raise ConfigError("rate must be >= 0")
        if self.output_len < 1:
            raise ConfigError("output_len must be >= 1")
        if self.kind in ADVERSARIAL_KINDS:
            self._validate_adversarial()
            return
        if self.group_count < 1 or self.queries_per_group < 1:
            raise ConfigError("group_count and queries_per_group must be >= 1")
        if not (0 < self.prefix_ratio < 1):
            raise ConfigError("prefix_ratio must lie in (0, 1)")
        if not self.length_cycle or min(self.length_cycle) < 1:
            raise ConfigError("length_cycle must be a non-empty list of positive lengths")
        if self.kind == "gsp_shared_prefix":
            for length in self.length_cycle:
                if shared_prefix_len(self.prefix_ratio, length) >= length:
                    raise ConfigError(
                        f"length {length} leaves no unshared suffix at prefix_ratio {self.prefix_ratio}"
                    )
        if self.kind == "multi_turn":
            if not self.rounds_cycle or min(self.rounds_cycle) < 1 or self.turn_len < 1:
                raise ConfigError("multi_turn needs positive rounds_cycle and turn_len")
        if self.kind == "long_doc_qa" and self.question_len < 1:
            raise ConfigError("question_len must be >= 1")

    def _validate_adversarial(self) -> None:
        if self.arrival != "fixed_order":
            raise ConfigError("adversarial workloads use fixed_order arrival")
        if not (2 <= self.min_len <= self.capacity):
            raise ConfigError("adversarial workloads need 2 <= min_len <= capacity")
        if self.kind == "adversarial_batch":
            if self.batch < 1 or self.batch * self.min_len > self.capacity:
                raise ConfigError("batch construction needs batch >= 1 and batch * min_len <= capacity")
        if self.cycles < 0 or self.n < 0:
            raise ConfigError("cycles and n must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> WorkloadSpec:
        return cls(**_known_fields(cls, d, "workload"))


@dataclass
class QueryMetrics:
    query_id: int
    worker: int
    hit_tokens: int
    input_tokens: int
    ttft: float
    latency: float
    queue_wait: float
    arrival_time: int = 0
    path_hits: int = 0
    path_misses: int = 0

    def __post_init__(self):
        if not (0 <= self.hit_tokens <= self.input_tokens):
            raise ValueError("hit_tokens must lie in [0, input_tokens]")


def shared_prefix_len(ratio: float, length: int) -> int:
    # round() guards against 0.7 * 10 == 7.000000000000001
    return math.ceil(round(ratio * length, 9))


def _known_fields(cls, d: dict, what: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {what} field(s): {', '.join(sorted(unknown))}")
    return dict(d)


def harmonic(n: int) -> float:
    return sum(1.0 / k for k in range(1, n + 1))
