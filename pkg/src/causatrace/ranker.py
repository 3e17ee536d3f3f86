"""Candidate selection over per-node activity streams.

Each node's activities sit in their own FIFO, ordered by the node's local
clock after skew remedy. Only activities whose remedied timestamp falls in the
sliding window ``[floor, floor + window]`` are buffered, where ``floor`` is the
smallest unprocessed timestamp. Candidates are chosen among queue heads:

* matched receive: a RECEIVE head whose SEND is already pending in the engine wins.
* priority: otherwise the head with the lowest priority
  (BEGIN < SEND < END < RECEIVE) wins, ties by timestamp then node key.

When every head is a RECEIVE without a pending SEND the queues are blocked
and :meth:`Ranker.resolve_block` either swaps a head with its successor
(concurrency disturbance) or discards a RECEIVE (noise or lost SEND).
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Optional

from .activity import Activity, ActivityType, EntrySpec, classify_entry
from .engine import Engine, SessionStats

log = logging.getLogger(__name__)

RECEIVE = ActivityType.RECEIVE
SEND = ActivityType.SEND

MS = 1_000_000


@dataclass(frozen=True)
class NoiseFilter:
    """Attribute filter; empty sets mean "no constraint"."""

    programs: frozenset = frozenset()
    deny_programs: frozenset = frozenset()
    deny_ips: frozenset = frozenset()
    deny_ports: frozenset = frozenset()

    def admits(self, a: Activity) -> bool:
        prog = a.context.program
        if self.programs and prog not in self.programs:
            return False
        if prog in self.deny_programs:
            return False
        m = a.message
        if self.deny_ips and (m.sender_ip in self.deny_ips or m.receiver_ip in self.deny_ips):
            return False
        if self.deny_ports and (m.sender_port in self.deny_ports or m.receiver_port in self.deny_ports):
            return False
        return True


def estimate_skew(first_timestamps: Mapping[str, int], reference_node: Optional[str] = None) -> dict[str, int]:
    """Offsets from first-activity alignment; ``remedied = raw - offset``.

    ``first_timestamps`` maps node -> local timestamp of its first activity.
    The reference defaults to the lexicographically smallest node.
    """
    if not first_timestamps:
        return {}
    if reference_node is None:
        reference_node = min(first_timestamps)
    if reference_node not in first_timestamps:
        raise KeyError(f"unknown reference node {reference_node!r}")
    ref = first_timestamps[reference_node]
    return {node: ts - ref for node, ts in first_timestamps.items()}


def first_timestamps(streams: Mapping[str, Iterable[Activity]]) -> dict[str, int]:
    out = {}
    for node, stream in streams.items():
        for a in stream:
            out[node] = a.timestamp
            break
    return out


class _Source:
    """Peekable per-node stream of remedied ``(ts, activity)`` pairs."""

    __slots__ = ("node", "_it", "offset", "next_ts", "next_item")

    def __init__(self, node: str, it: Iterator[Activity], offset: int):
        self.node = node
        self._it = it
        self.offset = offset
        self.next_ts: Optional[int] = None
        self.next_item: Optional[Activity] = None
        self.advance()

    def advance(self) -> None:
        for a in self._it:
            self.next_item = a
            self.next_ts = a.timestamp - self.offset
            return
        self.next_item = None
        self.next_ts = None


class Ranker:
    """One trace session's candidate selector.

    ``streams`` maps node key -> activities in local-timestamp order. Activities
    are entry-classified (when ``entry`` is given) and attribute-filtered
    before anything else, so filtered noise never influences skew estimation,
    window placement or ordering.
    """

    def __init__(
        self,
        streams: Mapping[str, Iterable[Activity]],
        engine: Engine,
        window_ms: float = 20,
        entry: Optional[EntrySpec] = None,
        noise_filter: Optional[NoiseFilter] = None,
        reference_node: Optional[str] = None,
        skew_offsets: Optional[Mapping[str, int]] = None,
    ):
        if window_ms <= 0:
            raise ValueError("window_ms must be positive")
        self.engine = engine
        self.stats: SessionStats = engine.stats
        self.window = int(window_ms * MS)
        self.noise_filter = noise_filter or NoiseFilter()
        self.entry = entry
        self.send_index_view = engine.pending_sends
        self.queues: dict[str, deque] = {}
        self._buffered_sends: Counter = Counter()
        self.window_floor: Optional[int] = None

        prepared = {node: self._prepare(iter(s)) for node, s in streams.items()}
        peeked: dict[str, Iterator[Activity]] = {}
        firsts: dict[str, int] = {}
        for node, it in prepared.items():
            head = next(it, None)
            if head is None:
                continue
            firsts[node] = head.timestamp
            peeked[node] = _chain_one(head, it)
        if skew_offsets is None:
            skew_offsets = estimate_skew(firsts, reference_node if reference_node in firsts else None)
        self.skew_offsets = dict(skew_offsets)
        self._sources = [
            _Source(node, peeked[node], self.skew_offsets.get(node, 0)) for node in sorted(peeked)
        ]
        for node in sorted(peeked):
            self.queues[node] = deque()

    def _prepare(self, it: Iterator[Activity]) -> Iterator[Activity]:
        admits = self.noise_filter.admits
        entry = self.entry
        stats = self.stats
        for a in it:
            if not admits(a):
                stats.filtered += 1
                continue
            yield classify_entry(a, entry) if entry is not None else a

    # -- buffering -------------------------------------------------------------

    def _fill(self) -> None:
        floor = None
        for q in self.queues.values():
            if q and (floor is None or q[0][0] < floor):
                floor = q[0][0]
        for src in self._sources:
            if src.next_ts is not None and (floor is None or src.next_ts < floor):
                floor = src.next_ts
        if floor is None:
            return
        self.window_floor = floor
        limit = floor + self.window
        live = []
        for src in self._sources:
            q = self.queues[src.node]
            while src.next_ts is not None and src.next_ts <= limit:
                a = src.next_item
                q.append((src.next_ts, a))
                if a.kind is SEND:
                    self._buffered_sends[a.message] += 1
                src.advance()
            if src.next_ts is not None:
                live.append(src)
        self._sources = live

    def admit(self, node: str, activity: Activity) -> bool:
        """Push one activity directly into a node queue (bypassing the sources).

        Returns False when the attribute filter rejects it.
        """
        if not self.noise_filter.admits(activity):
            self.stats.filtered += 1
            return False
        if self.entry is not None:
            activity = classify_entry(activity, self.entry)
        ts = activity.timestamp - self.skew_offsets.get(node, 0)
        q = self.queues.setdefault(node, deque())
        if q and q[-1][0] > ts:
            raise ValueError(f"activity out of order for node {node!r}")
        q.append((ts, activity))
        if activity.kind is SEND:
            self._buffered_sends[activity.message] += 1
        return True

    def _pop(self, node: str) -> Activity:
        _, a = self.queues[node].popleft()
        if a.kind is SEND:
            c = self._buffered_sends
            c[a.message] -= 1
            if not c[a.message]:
                del c[a.message]
        return a

    # -- selection -------------------------------------------------------------

    def is_noise(self, activity: Activity) -> bool:
        return (
            activity.kind is RECEIVE
            and activity.message not in self.send_index_view
            and activity.message not in self._buffered_sends
        )

    def rank(self) -> Optional[Activity]:
        pending = self.send_index_view
        while True:
            self._fill()
            matched = None
            lowest = None
            for node, q in self.queues.items():
                if not q:
                    continue
                ts, a = q[0]
                if a.kind is RECEIVE and a.message in pending:
                    if matched is None or ts < matched[0]:
                        matched = (ts, node)
                key = (a.kind, ts, node)
                if lowest is None or key < lowest:
                    lowest = key
            if matched is not None:
                return self._pop(matched[1])
            if lowest is None:
                return None
            if lowest[0] is not RECEIVE:
                return self._pop(lowest[2])
            self.resolve_block()

    def resolve_block(self) -> None:
        """Unblock queues whose heads are all RECEIVEs lacking a pending SEND."""
        heads = {node: q[0][1] for node, q in self.queues.items() if q}
        if not heads or any(a.kind is not RECEIVE or a.message in self.send_index_view for a in heads.values()):
            return
        wanted = {a.message: node for node, a in heads.items()}
        for node, q in self.queues.items():
            if len(q) < 2:
                continue
            second = q[1][1]
            head = q[0][1]
            if (
                second.kind is SEND
                and second.message in wanted
                and wanted[second.message] != node
                and second.context != head.context
            ):
                q[0], q[1] = q[1], q[0]
                self.stats.swaps += 1
                return
        victim = None
        for node, q in self.queues.items():
            if not q:
                continue
            ts, a = q[0]
            key = (not self.is_noise(a), ts, node)
            if victim is None or key < victim:
                victim = key
        self._pop(victim[2])
        self.stats.discarded_receives += 1

    def __iter__(self) -> Iterator[Activity]:
        while True:
            a = self.rank()
            if a is None:
                return
            yield a


def _chain_one(head: Activity, rest: Iterator[Activity]) -> Iterator[Activity]:
    yield head
    yield from rest
