"""KV cache-aware routing and leaf-token eviction for multi-worker LLM serving."""
from __future__ import annotations

from .errors import AdmissionError, ConfigError, ConsistencyError
from .eviction import Belady, LeafLRU, RandomizedLeafToken, brute_force_min_misses, make_policy, partition_phases
from .radix import AccessOutcome, PrefixKeys, RadixCache
from .routing import GlobalTracker, LbgrRouter, LbgrState, RoutingDecision, make_router
from .simulator import RunReport, SimConfig, run, sweep
from .types import CostParams, Query, QueryMetrics, WorkloadSpec
from .workload import generate_workload

__version__ = "0.1.0"
