"""Service-time cost, per-worker queue load and the makespan objective."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

from .radix import RadixCache
from .types import CostParams


def service_cost(params: CostParams, input_len: int, hits: int, output_len: int) -> float:
    """Time to serve one query: cached + uncached input tokens, plus decode."""
    if not (0 <= hits <= input_len):
        raise ValueError(f"hits={hits} must lie in [0, input_len={input_len}]")
    return (
        params.alpha_cached * hits
        + params.alpha_miss * (input_len - hits)
        + params.output_cost_per_token * output_len
    )


def prefill_cost(params: CostParams, input_len: int, hits: int) -> float:
    return service_cost(params, input_len, hits, 0)


@dataclass
class WorkerState:
    index: int
    cache: RadixCache
    queue_load: float = 0.0  # accumulated true service cost
    in_flight: set = field(default_factory=set)
    queue: deque = field(default_factory=deque)
    assigned: int = 0


def apply_assignment(workers: Sequence[WorkerState], chosen: int, cost: float) -> None:
    """Charge ``cost`` to the chosen worker only."""
    if not (0 <= chosen < len(workers)):
        raise IndexError(f"worker {chosen} out of range")
    if cost < 0:
        raise ValueError("cost must be >= 0")
    workers[chosen].queue_load += cost
    workers[chosen].assigned += 1


def makespan(loads: Sequence[float]) -> float:
    if len(loads) == 0:
        raise ValueError("makespan of an empty worker set")
    return max(loads)
