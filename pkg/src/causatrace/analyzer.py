"""Causal path patterns and latency breakdowns over completed CAGs."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .engine import CAG, CONTEXT, MESSAGE, CorruptCAG, Vertex

Signature = tuple[tuple[str, str], ...]


def _base_topo(cag: CAG) -> list[int]:
    vs = cag.vertices
    indeg = [(v.context_parent is not None) + (v.message_parent is not None) for v in vs]
    ready = [i for i, d in enumerate(indeg) if d == 0]
    order = []
    while ready:
        i = ready.pop()
        order.append(i)
        for c in (vs[i].context_child, vs[i].message_child):
            if c is not None:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
    if len(order) != len(vs):
        raise CorruptCAG(f"CAG {cag.id}: cycle detected")
    return order


def canonical_order(cag: CAG) -> list[Vertex]:
    """Deterministic linear extension of the CAG honouring the ordering rules.

    Beyond plain edge order, a fork puts the message successor before the
    context successor, and a join puts the context parent before the message
    parent, whenever the two are otherwise unrelated. Remaining freedom is
    resolved by a depth-first walk that prefers message successors, so the
    result depends only on graph shape, never on timestamps or insertion
    order.
    """
    vs = cag.vertices
    if not vs:
        return []
    roots = [v for v in vs if v.context_parent is None and v.message_parent is None]
    if len(roots) != 1:
        raise CorruptCAG(f"CAG {cag.id}: expected one root, found {len(roots)}")
    topo = _base_topo(cag)
    desc = [0] * len(vs)
    for i in reversed(topo):
        v = vs[i]
        bits = 1 << i
        for c in (v.context_child, v.message_child):
            if c is not None:
                bits |= desc[c]
        desc[i] = bits

    def related(a: int, b: int) -> bool:
        return bool(desc[a] >> b & 1 or desc[b] >> a & 1)

    # successors pushed in this order; the last pushed is visited first
    succ: list[list[int]] = [[] for _ in vs]
    indeg = [0] * len(vs)

    def link(a: int, b: int) -> None:
        succ[a].append(b)
        indeg[b] += 1

    extra_after: list[list[int]] = [[] for _ in vs]
    for i, v in enumerate(vs):
        if v.context_child is not None:
            link(i, v.context_child)
    for i, v in enumerate(vs):
        y, z = v.context_child, v.message_child
        if y is not None and z is not None and not related(y, z):
            extra_after[z].append(y)
        y, z = v.context_parent, v.message_parent
        if y is not None and z is not None and not related(y, z):
            extra_after[y].append(z)
    for i in range(len(vs)):
        for b in extra_after[i]:
            link(i, b)
    for i, v in enumerate(vs):
        if v.message_child is not None:
            link(i, v.message_child)

    stack = [roots[0].index]
    order: list[Vertex] = []
    while stack:
        i = stack.pop()
        order.append(vs[i])
        for c in succ[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                stack.append(c)
    if len(order) != len(vs):
        # ordering rules conflict for this shape; fall back to edge order alone
        return [vs[i] for i in _dfs_plain(cag)]
    return order


def _dfs_plain(cag: CAG) -> list[int]:
    vs = cag.vertices
    indeg = [(v.context_parent is not None) + (v.message_parent is not None) for v in vs]
    stack = [i for i, d in enumerate(indeg) if d == 0]
    out = []
    while stack:
        i = stack.pop()
        out.append(i)
        for c in (vs[i].context_child, vs[i].message_child):
            if c is not None:
                indeg[c] -= 1
                if indeg[c] == 0:
                    stack.append(c)
    return out


def signature(cag: CAG) -> Signature:
    return tuple((v.kind.name, v.program) for v in canonical_order(cag))


def signature_digest(sig: Signature) -> str:
    text = ";".join(f"{k}:{p}" for k, p in sig)
    return hashlib.sha1(text.encode()).hexdigest()[:10]


# -- latency ----------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    label: str
    kind: str  # "component" or "interaction"
    duration_ns: int
    percentage: float
    approximate: bool = False  # endpoints observed on different clocks


@dataclass(frozen=True)
class LatencyBreakdown:
    segments: tuple[Segment, ...]
    total_ns: float

    def by_label(self) -> dict[str, float]:
        """Percentage per segment label, summing repeated labels."""
        out: dict[str, float] = {}
        for s in self.segments:
            out[s.label] = out.get(s.label, 0.0) + s.percentage
        return out

    def durations_by_label(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for s in self.segments:
            out[s.label] = out.get(s.label, 0.0) + s.duration_ns
        return out


def _raw_segments(order: Sequence[Vertex]) -> list[tuple[str, str, int, bool]]:
    segs = []
    for a, b in zip(order, order[1:]):
        kind = "component" if a.context == b.context else "interaction"
        segs.append((f"{a.program}2{b.program}", kind, b.timestamp - a.timestamp, a.host != b.host))
    return segs


def latency_breakdown(item: "CAG | PathPattern") -> LatencyBreakdown:
    """Segment-wise latency of one CAG, or the mean breakdown of a pattern."""
    if isinstance(item, PathPattern):
        return item.breakdown()
    if not item.complete:
        raise ValueError(f"CAG {item.id} is not complete")
    segs = _raw_segments(canonical_order(item))
    total = sum(d for _, _, d, _ in segs)
    if total == 0:
        raise ValueError(f"CAG {item.id}: zero total duration")
    return LatencyBreakdown(
        tuple(Segment(lbl, kind, d, d * 100.0 / total, approx) for lbl, kind, d, approx in segs),
        total,
    )


@dataclass
class SegmentStats:
    label: str
    kind: str
    approximate: bool = False
    count: int = 0
    total: float = 0.0
    min: Optional[int] = None
    max: Optional[int] = None

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0

    def add(self, d: int) -> None:
        self.count += 1
        self.total += d
        self.min = d if self.min is None else min(self.min, d)
        self.max = d if self.max is None else max(self.max, d)

    def merged(self, other: "SegmentStats") -> "SegmentStats":
        mins = [m for m in (self.min, other.min) if m is not None]
        maxs = [m for m in (self.max, other.max) if m is not None]
        return SegmentStats(
            self.label,
            self.kind,
            self.approximate or other.approximate,
            self.count + other.count,
            self.total + other.total,
            min(mins) if mins else None,
            max(maxs) if maxs else None,
        )


@dataclass
class PathPattern:
    signature: Signature
    member_ids: list[int] = field(default_factory=list)
    fraction: float = 0.0
    segment_stats: list[SegmentStats] = field(default_factory=list)
    degraded_ids: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.member_ids)

    @property
    def digest(self) -> str:
        return signature_digest(self.signature)

    def breakdown(self) -> LatencyBreakdown:
        total = sum(s.mean for s in self.segment_stats)
        if not self.segment_stats or total == 0:
            raise ValueError(f"pattern {self.digest}: no latency samples")
        return LatencyBreakdown(
            tuple(
                Segment(s.label, s.kind, round(s.mean), s.mean * 100.0 / total, s.approximate)
                for s in self.segment_stats
            ),
            total,
        )

    def _accumulate(self, cag: CAG, order: Sequence[Vertex]) -> None:
        segs = _raw_segments(order)
        if not self.segment_stats:
            self.segment_stats = [SegmentStats(lbl, kind, approx) for lbl, kind, _, approx in segs]
        for st, (_, _, d, approx) in zip(self.segment_stats, segs):
            st.add(d)
            st.approximate = st.approximate or approx


def classify(cags: Iterable[CAG], include_degraded: bool = False) -> list[PathPattern]:
    """Partition complete CAGs by canonical signature.

    Degraded CAGs count toward pattern membership but only feed the latency
    statistics when ``include_degraded`` is set.
    """
    table: dict[Signature, PathPattern] = {}
    total = 0
    for cag in cags:
        if not cag.complete:
            continue
        order = canonical_order(cag)
        sig = tuple((v.kind.name, v.program) for v in order)
        pat = table.get(sig)
        if pat is None:
            pat = table[sig] = PathPattern(sig)
        pat.member_ids.append(cag.id)
        total += 1
        if cag.degraded:
            pat.degraded_ids.append(cag.id)
            if not include_degraded:
                continue
        pat._accumulate(cag, order)
    for pat in table.values():
        pat.member_ids.sort()
        pat.degraded_ids.sort()
        pat.fraction = pat.count / total if total else 0.0
    return sorted(table.values(), key=_rank_key)


def merge_patterns(*tables: Sequence[PathPattern]) -> list[PathPattern]:
    """Combine pattern tables built over disjoint CAG shards."""
    merged: dict[Signature, PathPattern] = {}
    for table in tables:
        for p in table:
            m = merged.get(p.signature)
            if m is None:
                merged[p.signature] = PathPattern(
                    p.signature, list(p.member_ids), 0.0,
                    [SegmentStats(s.label, s.kind, s.approximate, s.count, s.total, s.min, s.max) for s in p.segment_stats],
                    list(p.degraded_ids),
                )
                continue
            m.member_ids.extend(p.member_ids)
            m.degraded_ids.extend(p.degraded_ids)
            if not m.segment_stats:
                m.segment_stats = [SegmentStats(s.label, s.kind, s.approximate) for s in p.segment_stats]
            if p.segment_stats:
                m.segment_stats = [a.merged(b) for a, b in zip(m.segment_stats, p.segment_stats)]
    total = sum(p.count for p in merged.values())
    for p in merged.values():
        p.member_ids.sort()
        p.degraded_ids.sort()
        p.fraction = p.count / total if total else 0.0
    return sorted(merged.values(), key=_rank_key)


def _rank_key(p: PathPattern):
    return (-p.count, p.signature)


def dominated(patterns: Iterable[PathPattern], k: int) -> list[PathPattern]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return sorted(patterns, key=_rank_key)[:k]


# -- reporting --------------------------------------------------------------------


def pattern_rows(patterns: Sequence[PathPattern]) -> list[dict]:
    rows = []
    cumulative = 0.0
    for rank, p in enumerate(patterns, 1):
        cumulative += p.fraction
        row = {
            "rank": rank,
            "digest": p.digest,
            "count": p.count,
            "fraction": p.fraction,
            "cumulative": cumulative,
            "vertices": len(p.signature),
            "degraded": len(p.degraded_ids),
        }
        try:
            bd = p.breakdown()
        except ValueError:
            bd = None
        row["segments"] = (
            [
                {
                    "label": s.label,
                    "kind": s.kind,
                    "mean_ns": st.mean,
                    "min_ns": st.min,
                    "max_ns": st.max,
                    "percentage": s.percentage,
                    "approximate": s.approximate,
                }
                for s, st in zip(bd.segments, p.segment_stats)
            ]
            if bd
            else []
        )
        row["by_label"] = bd.by_label() if bd else {}
        rows.append(row)
    return rows


def format_pattern_table(rows: Sequence[dict]) -> str:
    lines = [f"{'rank':>4}  {'pattern':<10}  {'count':>7}  {'fraction':>8}  {'cum.':>6}  {'size':>4}"]
    for r in rows:
        lines.append(
            f"{r['rank']:>4}  {r['digest']:<10}  {r['count']:>7}  {r['fraction']:>8.2%}  "
            f"{r['cumulative']:>6.1%}  {r['vertices']:>4}"
        )
    return "\n".join(lines)


def format_latency_table(rows: Sequence[dict]) -> str:
    out = []
    for r in rows:
        out.append(f"pattern {r['rank']} ({r['digest']}), {r['count']} paths")
        if not r["segments"]:
            out.append("  (no latency samples)")
            continue
        for s in r["segments"]:
            flag = "~" if s["approximate"] else " "
            out.append(
                f"  {s['label']:<22} {s['kind']:<11} {s['mean_ns'] / 1e6:>10.3f} ms {flag} {s['percentage']:>6.2f}%"
            )
        agg = ", ".join(f"{k} {v:.1f}%" for k, v in sorted(r["by_label"].items(), key=lambda kv: -kv[1]))
        out.append(f"  by component: {agg}")
    return "\n".join(out)
