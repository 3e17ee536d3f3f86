"""Activity records, the raw kernel log grammar and the tuple log format.

A raw log line looks like::

    1000500 nodeA httpd 2301 17 SEND 10.0.0.1:80-10.0.0.2:8009 100

i.e. ``timestamp hostname program pid tid direction sip:sport-rip:rport size``.
The raw grammar only knows SEND and RECEIVE; BEGIN and END are derived
afterwards by :func:`classify_entry` from the port of the connection.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional

TUPLE_SCHEMA = "causatrace.tuple"
TUPLE_VERSION = 1


class ActivityType(enum.IntEnum):
    """Activity kinds; the integer value is the ranker priority."""

    BEGIN = 0
    SEND = 1
    END = 2
    RECEIVE = 3
    MAX = 4  # priority sentinel only, never attached to an activity


class ContextId(NamedTuple):
    host: str
    program: str
    pid: int
    tid: int

    def __str__(self) -> str:
        return f"{self.host}/{self.program}/{self.pid}/{self.tid}"


class MessageId(NamedTuple):
    sender_ip: str
    sender_port: int
    receiver_ip: str
    receiver_port: int

    def reversed(self) -> "MessageId":
        return MessageId(self.receiver_ip, self.receiver_port, self.sender_ip, self.sender_port)

    def __str__(self) -> str:
        return f"{self.sender_ip}:{self.sender_port}-{self.receiver_ip}:{self.receiver_port}"


@dataclass(frozen=True, slots=True)
class Activity:
    kind: ActivityType
    timestamp: int
    context: ContextId
    message: MessageId
    size: int
    truth_request_id: Optional[int] = field(default=None, compare=False)

    @property
    def node(self) -> str:
        return self.context.host

    def __post_init__(self) -> None:
        if self.kind is ActivityType.MAX:
            raise ValueError("MAX is a priority sentinel and cannot label an activity")


@dataclass(frozen=True)
class EntrySpec:
    """Which connections mark the start and end of a request.

    ``service_ips`` lists the addresses of known service nodes; a peer that is
    not in it counts as a client. When empty, every peer counts as a client.
    ``entry_program`` of None accepts any program.
    """

    entry_program: Optional[str] = None
    entry_ports: frozenset = frozenset({80})
    service_ips: frozenset = frozenset()

    def __post_init__(self) -> None:
        if not self.entry_ports:
            raise ValueError("entry_ports must not be empty")

    def _is_client(self, ip: str) -> bool:
        return ip not in self.service_ips


class LogParseError(ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None, field_name: Optional[str] = None):
        self.lineno = lineno
        self.field_name = field_name
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}{message}")


_RAW_FIELDS = ("timestamp", "hostname", "program_name", "pid", "tid", "direction", "endpoints", "size")


def _parse_int(token: str, name: str, lineno: Optional[int], lo: int = 0, hi: Optional[int] = None) -> int:
    try:
        value = int(token)
    except ValueError:
        raise LogParseError(f"field {name!r} is not an integer: {token!r}", lineno, name) from None
    if value < lo or (hi is not None and value > hi):
        raise LogParseError(f"field {name!r} out of range: {value}", lineno, name)
    return value


def _parse_endpoint(token: str, name: str, lineno: Optional[int]) -> tuple[str, int]:
    ip, sep, port = token.rpartition(":")
    if not sep or not ip:
        raise LogParseError(f"bad endpoint syntax in {name!r}: {token!r}", lineno, name)
    return ip, _parse_int(port, name, lineno, 0, 65535)


def parse_raw_line(line: str, lineno: Optional[int] = None) -> Activity:
    tokens = line.split()
    if len(tokens) != len(_RAW_FIELDS):
        raise LogParseError(
            f"expected {len(_RAW_FIELDS)} fields, got {len(tokens)}", lineno, "field count"
        )
    ts, host, prog, pid, tid, direction, endpoints, size = tokens
    if direction == "SEND":
        kind = ActivityType.SEND
    elif direction == "RECEIVE":
        kind = ActivityType.RECEIVE
    else:
        raise LogParseError(f"direction must be SEND or RECEIVE, got {direction!r}", lineno, "direction")
    sender, dash, receiver = endpoints.partition("-")
    if not dash:
        raise LogParseError(f"bad endpoint syntax: {endpoints!r}", lineno, "endpoints")
    sip, sport = _parse_endpoint(sender, "sender", lineno)
    rip, rport = _parse_endpoint(receiver, "receiver", lineno)
    return Activity(
        kind=kind,
        timestamp=_parse_int(ts, "timestamp", lineno),
        context=ContextId(host, prog, _parse_int(pid, "pid", lineno), _parse_int(tid, "tid", lineno)),
        message=MessageId(sip, sport, rip, rport),
        size=_parse_int(size, "size", lineno, 1),
    )


def format_raw_line(activity: Activity) -> str:
    """Serialize to the raw grammar (no trailing newline).

    BEGIN and END are written back as the RECEIVE and SEND they were derived from.
    """
    kind = activity.kind
    if kind in (ActivityType.SEND, ActivityType.END):
        direction = "SEND"
    else:
        direction = "RECEIVE"
    c, m = activity.context, activity.message
    return (
        f"{activity.timestamp} {c.host} {c.program} {c.pid} {c.tid} {direction} "
        f"{m.sender_ip}:{m.sender_port}-{m.receiver_ip}:{m.receiver_port} {activity.size}"
    )


def iter_raw_log(path: str | Path) -> Iterator[Activity]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield parse_raw_line(line, lineno)


def write_raw_log(activities: Iterable[Activity], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in activities:
            fh.write(format_raw_line(a))
            fh.write("\n")


def classify_entry(activity: Activity, spec: EntrySpec) -> Activity:
    """Rewrite client-facing RECEIVE/SEND on an entry port to BEGIN/END."""
    kind = activity.kind
    if kind not in (ActivityType.SEND, ActivityType.RECEIVE):
        return activity
    if spec.entry_program is not None and activity.context.program != spec.entry_program:
        return activity
    m = activity.message
    if kind is ActivityType.RECEIVE:
        if m.receiver_port in spec.entry_ports and spec._is_client(m.sender_ip):
            return replace(activity, kind=ActivityType.BEGIN)
    elif m.sender_port in spec.entry_ports and spec._is_client(m.receiver_ip):
        return replace(activity, kind=ActivityType.END)
    return activity


# -- tuple log ---------------------------------------------------------------


def activity_to_record(a: Activity) -> dict:
    c, m = a.context, a.message
    rec = {
        "kind": a.kind.name,
        "ts_ns": a.timestamp,
        "host": c.host,
        "prog": c.program,
        "pid": c.pid,
        "tid": c.tid,
        "sip": m.sender_ip,
        "sport": m.sender_port,
        "rip": m.receiver_ip,
        "rport": m.receiver_port,
        "size": a.size,
    }
    if a.truth_request_id is not None:
        rec["truth_request_id"] = a.truth_request_id
    return rec


def activity_from_record(rec: dict) -> Activity:
    return Activity(
        kind=ActivityType[rec["kind"]],
        timestamp=int(rec["ts_ns"]),
        context=ContextId(rec["host"], rec["prog"], int(rec["pid"]), int(rec["tid"])),
        message=MessageId(rec["sip"], int(rec["sport"]), rec["rip"], int(rec["rport"])),
        size=int(rec["size"]),
        truth_request_id=rec.get("truth_request_id"),
    )


class SchemaError(ValueError):
    pass


def write_tuple_log(activities: Iterable[Activity], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": TUPLE_SCHEMA, "version": TUPLE_VERSION}) + "\n")
        for a in activities:
            fh.write(json.dumps(activity_to_record(a), separators=(",", ":")) + "\n")


def read_tuple_log(path: str | Path) -> list[Activity]:
    out: list[Activity] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "schema" in rec:
                if rec["schema"] != TUPLE_SCHEMA or rec.get("version") != TUPLE_VERSION:
                    raise SchemaError(
                        f"{path}:{lineno}: unsupported tuple log schema "
                        f"{rec.get('schema')!r} v{rec.get('version')!r}"
                    )
                continue
            out.append(activity_from_record(rec))
    return out
