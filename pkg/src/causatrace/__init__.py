"""Request causal path reconstruction from kernel-level send/receive logs."""

from .activity import Activity, ActivityType, ContextId, EntrySpec, MessageId, classify_entry, parse_raw_line
from .analyzer import PathPattern, canonical_order, classify, dominated, latency_breakdown
from .engine import CAG, Engine, SessionStats, correlate
from .ranker import NoiseFilter, Ranker, estimate_skew

__all__ = [
    "Activity",
    "ActivityType",
    "CAG",
    "ContextId",
    "Engine",
    "EntrySpec",
    "MessageId",
    "NoiseFilter",
    "PathPattern",
    "Ranker",
    "SessionStats",
    "canonical_order",
    "classify",
    "classify_entry",
    "correlate",
    "dominated",
    "estimate_skew",
    "latency_breakdown",
    "parse_raw_line",
]
