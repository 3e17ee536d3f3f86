"""Incremental construction of component activity graphs (CAGs).

The engine consumes ranked activities one at a time and keeps two index maps:
``pending_sends`` (message id -> unmatched SEND) and ``latest_by_context``
(context id -> most recent vertex in that context). Fragmented messages are
merged by size accounting: SEND fragments add to the outstanding byte count,
RECEIVE fragments subtract from it, and the RECEIVE vertex is only created once
the count drops to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .activity import Activity, ActivityType, ContextId, MessageId

CONTEXT = "context"
MESSAGE = "message"

BEGIN = ActivityType.BEGIN
SEND = ActivityType.SEND
END = ActivityType.END
RECEIVE = ActivityType.RECEIVE


class CorruptCAG(ValueError):
    pass


@dataclass(eq=False)
class Vertex:
    """One logical activity of a CAG; merged fragments share a vertex.

    ``timestamp`` is the first fragment for a SEND and the last fragment for a
    RECEIVE, so component latencies span from "fully received" to "started
    sending".
    """

    index: int
    kind: ActivityType
    timestamp: int
    context: ContextId
    message: MessageId
    size: int
    fragments: int = 1
    cag: Optional["CAG"] = field(default=None, repr=False)
    context_parent: Optional[int] = None
    message_parent: Optional[int] = None
    context_child: Optional[int] = None
    message_child: Optional[int] = None

    @property
    def program(self) -> str:
        return self.context.program

    @property
    def host(self) -> str:
        return self.context.host


@dataclass(eq=False)
class CAG:
    id: int
    vertices: list[Vertex] = field(default_factory=list)
    edges: list[tuple[int, int, str]] = field(default_factory=list)
    complete: bool = False
    degraded: bool = False

    @property
    def root(self) -> Vertex:
        return self.vertices[0]

    @property
    def terminal(self) -> Optional[Vertex]:
        if self.vertices and self.vertices[-1].kind is END:
            return self.vertices[-1]
        return None

    def add_vertex(self, a: Activity, size: Optional[int] = None, fragments: int = 1) -> Vertex:
        v = Vertex(
            index=len(self.vertices),
            kind=a.kind,
            timestamp=a.timestamp,
            context=a.context,
            message=a.message,
            size=a.size if size is None else size,
            fragments=fragments,
            cag=self,
        )
        self.vertices.append(v)
        return v

    def add_edge(self, src: Vertex, dst: Vertex, kind: str) -> None:
        if kind == CONTEXT:
            if src.context_child is not None or dst.context_parent is not None:
                raise CorruptCAG(f"CAG {self.id}: second context edge at {src.index}->{dst.index}")
            src.context_child, dst.context_parent = dst.index, src.index
        else:
            if src.message_child is not None or dst.message_parent is not None:
                raise CorruptCAG(f"CAG {self.id}: second message edge at {src.index}->{dst.index}")
            src.message_child, dst.message_parent = dst.index, src.index
        self.edges.append((src.index, dst.index, kind))

    # -- serialization --------------------------------------------------

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "complete": self.complete,
            "degraded": self.degraded,
            "vertices": [
                {
                    "kind": v.kind.name,
                    "ts_ns": v.timestamp,
                    "host": v.context.host,
                    "prog": v.context.program,
                    "pid": v.context.pid,
                    "tid": v.context.tid,
                    "sip": v.message.sender_ip,
                    "sport": v.message.sender_port,
                    "rip": v.message.receiver_ip,
                    "rport": v.message.receiver_port,
                    "size": v.size,
                    "fragments": v.fragments,
                }
                for v in self.vertices
            ],
            "edges": [[s, d, k] for s, d, k in self.edges],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CAG":
        cag = cls(id=int(rec["id"]), complete=bool(rec["complete"]), degraded=bool(rec["degraded"]))
        for i, vr in enumerate(rec["vertices"]):
            cag.vertices.append(
                Vertex(
                    index=i,
                    kind=ActivityType[vr["kind"]],
                    timestamp=int(vr["ts_ns"]),
                    context=ContextId(vr["host"], vr["prog"], int(vr["pid"]), int(vr["tid"])),
                    message=MessageId(vr["sip"], int(vr["sport"]), vr["rip"], int(vr["rport"])),
                    size=int(vr["size"]),
                    fragments=int(vr.get("fragments", 1)),
                    cag=cag,
                )
            )
        for s, d, k in rec["edges"]:
            cag.add_edge(cag.vertices[s], cag.vertices[d], k)
        return cag


def write_cags(cags: Iterable[CAG], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for cag in cags:
            fh.write(json.dumps(cag.to_record(), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_cags(path: str | Path) -> list[CAG]:
    with open(path, encoding="utf-8") as fh:
        return [CAG.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class SessionStats:
    complete: int = 0
    incomplete: int = 0
    degraded: int = 0
    orphans: int = 0
    dropped_receives: int = 0
    discarded_receives: int = 0
    filtered: int = 0
    swaps: int = 0
    residual_pending: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(eq=False)
class PendingSend:
    vertex: Vertex
    remaining: int
    received: int = 0
    receiver: Optional[Vertex] = None  # set when the message completed early and was reopened
    receiver_context: Optional[ContextId] = None
    last_fragment: Optional[Activity] = None
    nfrag: int = 0

    @property
    def cag(self) -> CAG:
        return self.vertex.cag


class Engine:
    """Session state for correlation; feed it ranked activities in order."""

    def __init__(self, stats: Optional[SessionStats] = None):
        self.pending_sends: dict[MessageId, PendingSend] = {}
        self.latest_by_context: dict[ContextId, Vertex] = {}
        self.open_cags: dict[int, CAG] = {}
        self.incomplete: list[CAG] = []
        self.stats = stats if stats is not None else SessionStats()
        # messages completed by the receiver while the sender might still add fragments
        self._completed: dict[MessageId, tuple[Vertex, Vertex, int]] = {}
        # receiver context -> message with some, but not all, bytes received
        self._partial: dict[ContextId, MessageId] = {}
        self._next_id = 1

    # -- dispatch ----------------------------------------------------------

    def feed(self, a: Activity) -> Optional[CAG]:
        """Process one candidate; returns a CAG when ``a`` completes one."""
        kind = a.kind
        if kind is RECEIVE:
            self.on_receive(a)
        elif kind is SEND:
            self.on_send(a)
        elif kind is BEGIN:
            self.on_begin(a)
        elif kind is END:
            return self.on_end(a)
        return None

    def flush(self) -> list[CAG]:
        """End of stream: finalize partial messages, retire open CAGs as incomplete."""
        for msg in list(self._partial.values()):
            self._finalize_partial(msg)
        self.stats.residual_pending += len(self.pending_sends)
        self.pending_sends.clear()
        for cag in self.open_cags.values():
            self._mark_incomplete(cag)
        self.open_cags.clear()
        self.latest_by_context.clear()
        self._completed.clear()
        return self.incomplete

    # -- handlers ----------------------------------------------------------

    def on_begin(self, a: Activity) -> CAG:
        prev = self.latest_by_context.get(a.context)
        if prev is not None and prev.cag.root.context == a.context and prev.cag.id in self.open_cags:
            # the previous request in this entry context never saw its END
            self._abandon(prev.cag)
        cag = CAG(id=self._next_id)
        self._next_id += 1
        v = cag.add_vertex(a)
        self.open_cags[cag.id] = cag
        self.latest_by_context[a.context] = v
        return cag

    def on_end(self, a: Activity) -> Optional[CAG]:
        self._settle_context(a.context)
        parent = self.latest_by_context.get(a.context)
        if parent is None or parent.cag.id not in self.open_cags:
            self.stats.orphans += 1
            return None
        cag = parent.cag
        v = cag.add_vertex(a)
        cag.add_edge(parent, v, CONTEXT)
        cag.complete = True
        if not cag.degraded and not sizes_conserved(cag):
            cag.degraded = True
        self._retire(cag)
        self.stats.complete += 1
        if cag.degraded:
            self.stats.degraded += 1
        return cag

    def on_send(self, a: Activity) -> None:
        self._settle_context(a.context)
        parent = self.latest_by_context.get(a.context)
        if parent is None:
            self.stats.orphans += 1
            return
        msg = a.message
        if parent.kind is SEND and parent.message == msg:
            pending = self.pending_sends.get(msg)
            if pending is not None and pending.vertex is parent:
                pending.remaining += a.size
                parent.size += a.size
                parent.fragments += 1
                return
            done = self._completed.pop(msg, None)
            if done is not None and done[0] is parent:
                # the receiver already drained every byte ranked so far
                send_v, recv_v, deficit = done
                send_v.size += a.size
                send_v.fragments += 1
                remaining = a.size - deficit
                if remaining > 0:
                    self.pending_sends[msg] = PendingSend(
                        send_v, remaining, received=recv_v.size, receiver=recv_v,
                        receiver_context=recv_v.context,
                    )
                    self._partial[recv_v.context] = msg
                else:
                    self._completed[msg] = (send_v, recv_v, -remaining)
                return
        old = self.pending_sends.get(msg)
        if old is not None:
            # connection reused while bytes are still outstanding
            self._force_finalize(msg)
        self._completed.pop(msg, None)
        cag = parent.cag
        v = cag.add_vertex(a)
        cag.add_edge(parent, v, CONTEXT)
        self.pending_sends[msg] = PendingSend(v, a.size)
        self.latest_by_context[a.context] = v

    def on_receive(self, a: Activity) -> None:
        msg = a.message
        pending = self.pending_sends.get(msg)
        if pending is None:
            self.stats.dropped_receives += 1
            return
        if pending.receiver_context is not None and pending.receiver_context != a.context:
            # another context reads the same connection: treat as a new reader
            self._force_finalize(msg)
            self.stats.dropped_receives += 1
            return
        if pending.receiver_context is None:
            self._settle_context(a.context)
        pending.remaining -= a.size
        pending.received += a.size
        pending.receiver_context = a.context
        pending.last_fragment = a
        pending.nfrag += 1
        if pending.remaining > 0:
            self._partial[a.context] = msg
            return
        self._partial.pop(a.context, None)
        self._complete_message(msg, pending, a)

    # -- internals -----------------------------------------------------------

    def _complete_message(self, msg: MessageId, pending: PendingSend, last: Optional[Activity]) -> Vertex:
        del self.pending_sends[msg]
        send_v = pending.vertex
        cag = send_v.cag
        if pending.receiver is not None:
            recv_v = pending.receiver
            recv_v.size = pending.received
            recv_v.fragments += pending.nfrag
            if last is not None:
                recv_v.timestamp = last.timestamp
        else:
            recv_v = cag.add_vertex(last, size=pending.received, fragments=pending.nfrag)
            cag.add_edge(send_v, recv_v, MESSAGE)
            ctx_parent = self.latest_by_context.get(last.context)
            if ctx_parent is not None and ctx_parent.cag is cag:
                cag.add_edge(ctx_parent, recv_v, CONTEXT)
            self.latest_by_context[last.context] = recv_v
        # a negative balance is settled by SEND fragments not yet ranked, if any
        self._completed[msg] = (send_v, recv_v, max(0, -pending.remaining))
        return recv_v

    def _settle_context(self, ctx: ContextId) -> None:
        """A context moved on while one of its inbound messages is short of bytes."""
        msg = self._partial.get(ctx)
        if msg is not None:
            self._finalize_partial(msg)

    def _finalize_partial(self, msg: MessageId) -> None:
        pending = self.pending_sends.get(msg)
        if pending is None:
            return
        self._partial.pop(pending.receiver_context, None)
        pending.cag.degraded = True
        if pending.last_fragment is None and pending.receiver is None:
            del self.pending_sends[msg]
            return
        self._complete_message(msg, pending, pending.last_fragment)

    _force_finalize = _finalize_partial

    def _retire(self, cag: CAG) -> None:
        del self.open_cags[cag.id]
        for v in cag.vertices:
            if self.latest_by_context.get(v.context) is v:
                del self.latest_by_context[v.context]
            if v.kind is SEND:
                p = self.pending_sends.get(v.message)
                if p is not None and p.vertex is v:
                    del self.pending_sends[v.message]
                    self.stats.residual_pending += 1
                    if p.receiver_context is not None:
                        self._partial.pop(p.receiver_context, None)
                done = self._completed.get(v.message)
                if done is not None and done[0] is v:
                    del self._completed[v.message]

    def _abandon(self, cag: CAG) -> None:
        self._retire(cag)
        self._mark_incomplete(cag)

    def _mark_incomplete(self, cag: CAG) -> None:
        if not sizes_conserved(cag):
            cag.degraded = True
        self.incomplete.append(cag)
        self.stats.incomplete += 1


def sizes_conserved(cag: CAG) -> bool:
    vs = cag.vertices
    return all(vs[s].size == vs[d].size for s, d, k in cag.edges if k == MESSAGE)


def correlate(candidates: Iterable[Activity], engine: Optional[Engine] = None) -> Iterator[CAG]:
    """Drive ``engine`` with ranked candidates, yielding CAGs as their END arrives.

    Residual open CAGs are flushed to ``engine.incomplete`` once the candidate
    source is exhausted.
    """
    engine = engine if engine is not None else Engine()
    for a in candidates:
        cag = engine.feed(a)
        if cag is not None:
            yield cag
    engine.flush()
