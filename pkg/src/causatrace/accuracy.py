"""Scoring correlated CAGs against simulator ground truth.

A CAG counts as a correct path when its vertices (kind, context, message and
merged size) and its edges match those of exactly one true request. Timestamps
are ignored so that clock skew on the logs does not affect the score.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

from .activity import Activity, ActivityType, EntrySpec, classify_entry
from .engine import CAG, CONTEXT, MESSAGE
from .simulator import GroundTruth

VertexKey = tuple
PathKey = tuple[tuple, tuple]


def _vkey(kind, context, message, size) -> VertexKey:
    return (int(kind), tuple(context), tuple(message), size)


def _path_key(vkeys: Sequence[VertexKey], edges: Iterable[tuple[int, int, str]]) -> PathKey:
    ekeys = sorted((vkeys[s], vkeys[d], k) for s, d, k in edges)
    return tuple(sorted(vkeys)), tuple(ekeys)


def cag_key(cag: CAG) -> PathKey:
    vkeys = [_vkey(v.kind, v.context, v.message, v.size) for v in cag.vertices]
    return _path_key(vkeys, cag.edges)


def truth_paths(truth: GroundTruth, entry: Optional[EntrySpec] = None) -> dict[int, PathKey]:
    """Vertex and edge keys of every true request.

    Each context's activities are walked in global time order across all
    requests, so a context edge joins two vertices only when nothing from
    another request happened in that context between them. Fragments merge
    under the same rule; the k-th SEND of a message pairs with its k-th
    RECEIVE.
    """
    flat = [(a.timestamp, rid, i, a) for rid, acts in truth.requests.items() for i, a in enumerate(acts)]
    flat.sort(key=lambda t: (t[0], t[1], t[2]))
    vertices: dict[int, list[list]] = defaultdict(list)  # rid -> [kind, context, message, size]
    edges: dict[int, list] = defaultdict(list)
    sends: dict[int, dict] = defaultdict(lambda: defaultdict(list))
    recvs: dict[int, dict] = defaultdict(lambda: defaultdict(list))
    last: dict = {}  # context -> (rid, vertex index)
    for _, rid, _, a in flat:
        if entry is not None:
            a = classify_entry(a, entry)
        vs = vertices[rid]
        prev = last.get(a.context)
        same = prev is not None and prev[0] == rid
        if (
            same
            and a.kind in (ActivityType.SEND, ActivityType.RECEIVE)
            and vs[prev[1]][0] is a.kind
            and vs[prev[1]][2] == a.message
        ):
            vs[prev[1]][3] += a.size
            continue
        idx = len(vs)
        vs.append([a.kind, a.context, a.message, a.size])
        if same:
            edges[rid].append((prev[1], idx, CONTEXT))
        last[a.context] = (rid, idx)
        if a.kind is ActivityType.SEND:
            sends[rid][a.message].append(idx)
        elif a.kind is ActivityType.RECEIVE:
            recvs[rid][a.message].append(idx)
    out = {}
    for rid, vs in vertices.items():
        es = edges[rid]
        for msg, rs in recvs[rid].items():
            for s_, r in zip(sends[rid].get(msg, ()), rs):
                es.append((s_, r, MESSAGE))
        out[rid] = _path_key([_vkey(*v) for v in vs], es)
    return out


def truth_path(activities: Sequence[Activity], entry: Optional[EntrySpec] = None) -> PathKey:
    """Keys of a single request considered on its own."""
    return truth_paths(GroundTruth(requests={0: list(activities)}), entry)[0]


@dataclass(frozen=True)
class AccuracyReport:
    total_requests: int
    correct_paths: int
    path_accuracy: float
    incomplete: int
    degraded: int
    mismatched: int = 0
    endpoint_correct: int = 0
    endpoint_accuracy: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _endpoint_key(root, terminal, contexts) -> tuple:
    return (
        (int(root[0]), tuple(root[1]), tuple(root[2])),
        (int(terminal[0]), tuple(terminal[1]), tuple(terminal[2])),
        frozenset(tuple(c) for c in contexts),
    )


def score(cags: Iterable[CAG], truth: GroundTruth, entry: Optional[EntrySpec] = None) -> AccuracyReport:
    """Compare CAGs with ground truth.

    ``endpoint_correct`` is a looser measure: the CAG starts and ends at the
    request's BEGIN and END and visits the same set of contexts, whatever its
    inner structure.
    """
    by_key: dict[PathKey, list[int]] = defaultdict(list)
    by_ends: dict[tuple, list[int]] = defaultdict(list)
    for rid, key in truth_paths(truth, entry).items():
        by_key[key].append(rid)
    for rid, acts in truth.requests.items():
        if not acts:
            continue
        ordered = sorted(acts, key=lambda a: a.timestamp)
        if entry is not None:
            ordered = [classify_entry(a, entry) for a in ordered]
        first, last = ordered[0], ordered[-1]
        by_ends[
            _endpoint_key((first.kind, first.context, first.message), (last.kind, last.context, last.message),
                          {a.context for a in ordered})
        ].append(rid)

    claimed: set[int] = set()
    ends_claimed: set[int] = set()
    correct = mismatched = incomplete = degraded = endpoint = 0
    for cag in cags:
        if not cag.complete:
            incomplete += 1
            continue
        if cag.degraded:
            degraded += 1
        rids = by_key.get(cag_key(cag), [])
        if len(rids) == 1 and rids[0] not in claimed:
            claimed.add(rids[0])
            correct += 1
        else:
            mismatched += 1
        term = cag.terminal
        if term is not None:
            ek = _endpoint_key(
                (cag.root.kind, cag.root.context, cag.root.message),
                (term.kind, term.context, term.message),
                {v.context for v in cag.vertices},
            )
            for rid in by_ends.get(ek, []):
                if rid not in ends_claimed:
                    ends_claimed.add(rid)
                    endpoint += 1
                    break
    total = len(truth.requests)
    return AccuracyReport(
        total_requests=total,
        correct_paths=correct,
        path_accuracy=correct / total if total else 0.0,
        incomplete=incomplete,
        degraded=degraded,
        mismatched=mismatched,
        endpoint_correct=endpoint,
        endpoint_accuracy=endpoint / total if total else 0.0,
    )


def truth_counter(truth: GroundTruth, entry: Optional[EntrySpec] = None) -> Counter:
    return Counter(truth_paths(truth, entry).values())
