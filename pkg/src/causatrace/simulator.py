"""Deterministic multi-tier service simulator emitting raw activity logs.

Requests flow synchronously down a chain of tiers. A worker (a pooled thread
or a fresh process) is held by a request from the moment it reads the request
until it has written the response, which mirrors the "one execution entity
serves one request at a time" model the correlator relies on. Every logged
activity is tagged with the request id in the ground truth; the raw logs carry
no labels.

Disturbances (noise processes, clock skew, per-CPU clock offsets, sampling
windows and line deletion) are applied after the ground truth is fixed and
draw from their own random streams, so toggling one never perturbs the
service traffic itself.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import random
import re
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Generator, Iterable, Optional, Sequence

from .activity import (
    Activity,
    ActivityType,
    ContextId,
    EntrySpec,
    MessageId,
    activity_from_record,
    activity_to_record,
    format_raw_line,
)

BEGIN, SEND, END, RECEIVE = ActivityType.BEGIN, ActivityType.SEND, ActivityType.END, ActivityType.RECEIVE
SEC = 1_000_000_000
US = 1_000
EPHEMERAL_LO, EPHEMERAL_HI = 32768, 60999


class ConfigError(ValueError):
    pass


_UNITS = {"ns": 1, "us": US, "ms": 1_000_000, "s": SEC}


def parse_duration(value: Any) -> int:
    """Nanoseconds from a number (already ns) or a string like ``"2.5ms"``."""
    if isinstance(value, bool):
        raise ConfigError(f"bad duration {value!r}")
    if isinstance(value, (int, float)):
        return int(value)
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*(ns|us|ms|s)\s*", str(value))
    if not m:
        raise ConfigError(f"bad duration {value!r}")
    return int(float(m.group(1)) * _UNITS[m.group(2)])


@dataclass(frozen=True)
class Distribution:
    kind: str = "fixed"
    value: int = 0  # fixed
    low: int = 0  # uniform
    high: int = 0
    mean: int = 0  # exponential

    def __post_init__(self) -> None:
        if self.kind == "fixed":
            ok = self.value >= 0
        elif self.kind == "uniform":
            ok = 0 <= self.low <= self.high
        elif self.kind == "exponential":
            ok = self.mean > 0
        else:
            raise ConfigError(f"unknown distribution kind {self.kind!r}")
        if not ok:
            raise ConfigError(f"invalid {self.kind} distribution parameters: {self}")

    @classmethod
    def parse(cls, spec: Any) -> "Distribution":
        if isinstance(spec, Distribution):
            return spec
        if not isinstance(spec, dict):
            return cls("fixed", value=parse_duration(spec))
        kind = spec.get("kind", "fixed")
        try:
            if kind == "fixed":
                return cls(kind, value=parse_duration(spec["value"]))
            if kind == "uniform":
                return cls(kind, low=parse_duration(spec["low"]), high=parse_duration(spec["high"]))
            if kind == "exponential":
                return cls(kind, mean=parse_duration(spec["mean"]))
        except KeyError as exc:
            raise ConfigError(f"{kind} distribution needs {exc.args[0]!r}") from None
        raise ConfigError(f"unknown distribution kind {kind!r}")

    def sample(self, rng: random.Random) -> int:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return rng.randint(self.low, self.high)
        return int(rng.expovariate(1.0 / self.mean))

    def expected(self) -> float:
        if self.kind == "fixed":
            return float(self.value)
        if self.kind == "uniform":
            return (self.low + self.high) / 2
        return float(self.mean)

    def scaled(self, factor: float) -> "Distribution":
        return Distribution(
            self.kind,
            value=int(self.value * factor),
            low=int(self.low * factor),
            high=int(self.high * factor),
            mean=int(self.mean * factor),
        )


@dataclass(frozen=True)
class TierSpec:
    program: str
    host: str
    ip: str
    port: int
    concurrency: str = "thread-pool"  # or "process-per-request"
    pool_size: int = 8
    service_time: Distribution = Distribution("fixed", value=1_000_000)
    link_latency: Distribution = Distribution("fixed", value=100 * US)  # link from the upstream tier
    downstream_fanout: int = 1
    send_parts: tuple[int, int] = (1, 2)
    receive_parts: tuple[int, int] = (1, 3)
    message_size: tuple[int, int] = (64, 4096)
    pid: int = 0

    def __post_init__(self) -> None:
        if self.concurrency not in ("thread-pool", "process-per-request"):
            raise ConfigError(f"tier {self.program}: unknown concurrency model {self.concurrency!r}")
        if self.concurrency == "thread-pool" and self.pool_size < 1:
            raise ConfigError(f"tier {self.program}: pool size must be >= 1")
        if self.service_time.kind == "fixed" and self.service_time.value <= 0:
            raise ConfigError(f"tier {self.program}: service time must be positive")
        if not (0 <= self.port <= 65535):
            raise ConfigError(f"tier {self.program}: bad port {self.port}")
        for lo, hi in (self.send_parts, self.receive_parts):
            if not (1 <= lo <= hi):
                raise ConfigError(f"tier {self.program}: fragment part bounds must satisfy 1 <= lo <= hi")
        if not (1 <= self.message_size[0] <= self.message_size[1]):
            raise ConfigError(f"tier {self.program}: bad message size range")
        if self.downstream_fanout < 0:
            raise ConfigError(f"tier {self.program}: fanout must be >= 0")


@dataclass(frozen=True)
class RequestClass:
    name: str
    weight: float = 1.0
    fanout: Optional[tuple[int, ...]] = None  # per tier, overrides TierSpec.downstream_fanout


@dataclass(frozen=True)
class ClientSpec:
    ips: tuple[str, ...] = ("192.168.1.10",)
    concurrent: Optional[int] = 10
    rate: Optional[float] = None  # open-loop arrivals per second
    think_time: Distribution = Distribution("exponential", mean=50_000_000)
    ramp_up: float = 0.0  # seconds
    steady: float = 60.0
    ramp_down: float = 0.0
    requests: Optional[int] = None  # stop issuing after this many
    request_size: tuple[int, int] = (200, 800)
    response_size: tuple[int, int] = (500, 8000)

    def __post_init__(self) -> None:
        if not self.ips:
            raise ConfigError("client ip pool must not be empty")
        if self.concurrent is None and self.rate is None:
            raise ConfigError("clients need either 'concurrent' or 'rate'")
        if self.concurrent is not None and self.concurrent < 1:
            raise ConfigError("concurrent clients must be >= 1")
        if self.rate is not None and self.rate <= 0:
            raise ConfigError("rate must be positive")

    @property
    def duration_ns(self) -> int:
        return int((self.ramp_up + self.steady + self.ramp_down) * SEC)


@dataclass(frozen=True)
class NoiseProcess:
    program: str
    host: str
    ip: str
    port: int
    rate: float  # activities per second
    peer_ip: str = "172.16.0.99"
    pid: int = 31337


@dataclass(frozen=True)
class DisturbanceSpec:
    noise_processes: tuple[NoiseProcess, ...] = ()
    clock_skew_ns: tuple[tuple[str, int], ...] = ()
    deletion_percent: float = 0.0
    deletion_target: str = "all"  # a program name or "all"
    collection_windows: tuple[tuple[float, float], ...] = ()  # (on_s, off_s) pairs
    rounds: int = 1
    cpus: int = 1
    cpu_skew_ns: int = 0  # max |offset| of a CPU clock against its host clock

    def __post_init__(self) -> None:
        if not (0 <= self.deletion_percent <= 100):
            raise ConfigError("deletion percent must be within [0, 100]")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.cpus < 1:
            raise ConfigError("cpus must be >= 1")

    def skew_for(self, host: str) -> int:
        return dict(self.clock_skew_ns).get(host, 0)


@dataclass(frozen=True)
class Topology:
    tiers: tuple[TierSpec, ...]
    clients: ClientSpec = ClientSpec()
    classes: tuple[RequestClass, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.tiers:
            raise ConfigError("topology needs at least one tier")
        for c in self.classes:
            if c.fanout is not None and len(c.fanout) != len(self.tiers):
                raise ConfigError(f"class {c.name}: fanout needs one entry per tier")
            if c.weight < 0:
                raise ConfigError(f"class {c.name}: weight must be >= 0")

    @property
    def entry(self) -> TierSpec:
        return self.tiers[0]

    def entry_spec(self) -> EntrySpec:
        return EntrySpec(
            entry_program=self.entry.program,
            entry_ports=frozenset({self.entry.port}),
            service_ips=frozenset(t.ip for t in self.tiers),
        )

    def fanouts(self, cls: Optional[RequestClass]) -> tuple[int, ...]:
        if cls is not None and cls.fanout is not None:
            f = list(cls.fanout)
        else:
            f = [t.downstream_fanout for t in self.tiers]
        f[-1] = 0
        return tuple(f)


# -- config loading ------------------------------------------------------------


def _pair(v: Any, name: str) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    try:
        lo, hi = v
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer or a [low, high] pair") from None
    return (int(lo), int(hi))


def topology_from_dict(cfg: dict) -> tuple[Topology, DisturbanceSpec]:
    try:
        tiers = []
        for i, t in enumerate(cfg["tiers"]):
            conc = t.get("concurrency", "thread-pool")
            pool = 8
            if isinstance(conc, dict):
                pool = int(conc.get("size", pool))
                conc = conc.get("model", "thread-pool")
            tiers.append(
                TierSpec(
                    program=t["program"],
                    host=t["host"],
                    ip=t["ip"],
                    port=int(t["port"]),
                    concurrency=conc,
                    pool_size=int(t.get("pool_size", pool)),
                    service_time=Distribution.parse(t.get("service_time", "1ms")),
                    link_latency=Distribution.parse(t.get("link_latency", "100us")),
                    downstream_fanout=int(t.get("downstream_fanout", 1)),
                    send_parts=_pair(t.get("send_parts", (1, 2)), "send_parts"),
                    receive_parts=_pair(t.get("receive_parts", (1, 3)), "receive_parts"),
                    message_size=_pair(t.get("message_size", (64, 4096)), "message_size"),
                    pid=int(t.get("pid", 1000 * (i + 1))),
                )
            )
        c = cfg.get("clients", {})
        clients = ClientSpec(
            ips=tuple(c.get("ips", ("192.168.1.10",))),
            concurrent=c.get("concurrent", None if "rate" in c else 10),
            rate=c.get("rate"),
            think_time=Distribution.parse(c.get("think_time", {"kind": "exponential", "mean": "50ms"})),
            ramp_up=float(c.get("ramp_up", 0.0)),
            steady=float(c.get("steady", 60.0)),
            ramp_down=float(c.get("ramp_down", 0.0)),
            requests=c.get("requests"),
            request_size=_pair(c.get("request_size", (200, 800)), "request_size"),
            response_size=_pair(c.get("response_size", (500, 8000)), "response_size"),
        )
        classes = tuple(
            RequestClass(
                name=k["name"],
                weight=float(k.get("weight", 1.0)),
                fanout=tuple(int(x) for x in k["fanout"]) if "fanout" in k else None,
            )
            for k in cfg.get("classes", ())
        )
        topo = Topology(tuple(tiers), clients, classes, int(cfg.get("seed", 0)))
        d = cfg.get("disturbances", {}) or {}
        deletion = d.get("deletion", {}) or {}
        dist = DisturbanceSpec(
            noise_processes=tuple(
                NoiseProcess(
                    program=n["program"],
                    host=n["host"],
                    ip=n["ip"],
                    port=int(n["port"]),
                    rate=float(n["rate"]),
                    peer_ip=n.get("peer_ip", "172.16.0.99"),
                    pid=int(n.get("pid", 31337)),
                )
                for n in d.get("noise_processes", ())
            ),
            clock_skew_ns=tuple((h, parse_duration(v)) for h, v in (d.get("clock_skew", {}) or {}).items()),
            deletion_percent=float(deletion.get("percent", 0.0)),
            deletion_target=str(deletion.get("target", "all")),
            collection_windows=tuple((float(a), float(b)) for a, b in d.get("collection_windows", ())),
            rounds=int(d.get("rounds", 1)),
            cpus=int(d.get("cpus", 1)),
            cpu_skew_ns=parse_duration(d.get("cpu_skew", 0)),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid topology config: {exc!r}") from exc
    return topo, dist


def load_config(path: str | Path) -> tuple[Topology, DisturbanceSpec, dict]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        cfg = json.loads(text)
    else:
        import yaml

        cfg = yaml.safe_load(text)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    topo, dist = topology_from_dict(cfg)
    return topo, dist, cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


# -- discrete-event core ----------------------------------------------------------

Proc = Generator[tuple, Any, None]


class _Pool:
    def __init__(self, tier: TierSpec):
        self.tier = tier
        self.free: deque[int] = deque()
        self.waiting: deque[Proc] = deque()
        self._next_pid = tier.pid + 1
        if tier.concurrency == "thread-pool":
            self.free.extend(tier.pid + 1 + k for k in range(tier.pool_size))

    def context(self, worker: int) -> ContextId:
        t = self.tier
        if t.concurrency == "thread-pool":
            return ContextId(t.host, t.program, t.pid, worker)
        return ContextId(t.host, t.program, worker, worker)


class _Scheduler:
    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._seq = 0

    def at(self, t: int, proc: Proc, value: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, proc, value))

    def run(self) -> None:
        heap = self._heap
        while heap:
            t, _, proc, value = heapq.heappop(heap)
            self.now = t
            self._step(proc, value)

    def _step(self, proc: Proc, value: Any) -> None:
        while True:
            try:
                cmd = proc.send(value)
            except StopIteration:
                return
            op = cmd[0]
            if op == "sleep":
                dt = cmd[1]
                if dt > 0:
                    self.at(self.now + dt, proc)
                    return
                value = None
            elif op == "until":
                if cmd[1] > self.now:
                    self.at(cmd[1], proc)
                    return
                value = None
            elif op == "acquire":
                pool: _Pool = cmd[1]
                if pool.tier.concurrency == "process-per-request":
                    value = pool._next_pid
                    pool._next_pid += 1
                elif pool.free:
                    value = pool.free.popleft()
                else:
                    pool.waiting.append(proc)
                    return
            elif op == "release":
                pool, worker = cmd[1], cmd[2]
                if pool.tier.concurrency == "thread-pool":
                    if pool.waiting:
                        self.at(self.now, pool.waiting.popleft(), worker)
                    else:
                        pool.free.append(worker)
                value = None
            elif op == "spawn":
                self.at(self.now, cmd[1])
                value = None
            else:  # pragma: no cover - programming error
                raise RuntimeError(f"unknown command {op!r}")


# -- generation -----------------------------------------------------------------


@dataclass
class GroundTruth:
    """Per-request activity sequences with true (unskewed) timestamps."""

    requests: dict[int, list[Activity]] = field(default_factory=dict)
    classes: dict[int, str] = field(default_factory=dict)
    service_ns: dict[int, dict[str, int]] = field(default_factory=dict)
    latency_ns: dict[int, dict[str, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.requests)

    def to_records(self) -> Iterable[dict]:
        for rid in sorted(self.requests):
            yield {
                "request_id": rid,
                "class": self.classes.get(rid),
                "activities": [activity_to_record(a) for a in self.requests[rid]],
                "service_ns": self.service_ns.get(rid, {}),
                "link_latency_ns": self.latency_ns.get(rid, {}),
            }

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "GroundTruth":
        gt = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                rid = int(rec["request_id"])
                gt.requests[rid] = [activity_from_record(a) for a in rec["activities"]]
                if rec.get("class") is not None:
                    gt.classes[rid] = rec["class"]
                gt.service_ns[rid] = rec.get("service_ns", {})
                gt.latency_ns[rid] = rec.get("link_latency_ns", {})
        return gt


@dataclass
class SimulationResult:
    topology: Topology
    disturbances: DisturbanceSpec
    truth: GroundTruth
    logs: dict[str, list[Activity]]  # host -> activities as logged (local clock)
    end_time: int

    def raw_lines(self, host: str) -> list[str]:
        return [format_raw_line(a) for a in self.logs[host]]

    def write(self, out_dir: str | Path, config: Optional[dict] = None) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for host in sorted(self.logs):
            name = f"{host}.log"
            with open(out / name, "w", encoding="utf-8") as fh:
                for a in self.logs[host]:
                    fh.write(format_raw_line(a))
                    fh.write("\n")
            files.append(name)
        self.truth.write(out / "truth.jsonl")
        manifest = build_manifest(self.topology, self.disturbances, config, files, len(self.truth))
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return manifest


def build_manifest(topo: Topology, dist: DisturbanceSpec, config: Optional[dict], files: list[str], n: int) -> dict:
    entry = topo.entry_spec()
    return {
        "seed": topo.seed,
        "config_digest": config_digest(config if config is not None else _topology_dict(topo, dist)),
        "hosts": sorted({t.host for t in topo.tiers} | {p.host for p in dist.noise_processes}),
        "programs": [t.program for t in topo.tiers],
        "entry": {
            "program": entry.entry_program,
            "ports": sorted(entry.entry_ports),
            "service_ips": sorted(entry.service_ips),
        },
        "files": files,
        "requests": n,
    }


def _topology_dict(topo: Topology, dist: DisturbanceSpec) -> dict:
    return {"topology": asdict(topo), "disturbances": asdict(dist)}


def _composition(rng: random.Random, total: int, parts: int) -> list[int]:
    """Split ``total`` into ``parts`` positive integers uniformly at random."""
    parts = max(1, min(parts, total))
    if parts == 1:
        return [total]
    cuts = sorted(rng.sample(range(1, total), parts - 1))
    bounds = [0, *cuts, total]
    return [bounds[i + 1] - bounds[i] for i in range(parts)]


class _Generator:
    FRAGMENT_GAP = (5 * US, 30 * US)

    def __init__(self, topo: Topology):
        self.topo = topo
        self.rng = random.Random(topo.seed)
        self.sched = _Scheduler()
        self.pools = [_Pool(t) for t in topo.tiers]
        self.events: list[Activity] = []
        self.truth = GroundTruth()
        self._ports: dict[str, int] = {}
        self._rid = 0
        self._issued = 0
        self._last_ts: dict[ContextId, int] = {}
        classes = topo.classes or (RequestClass("default"),)
        self._classes = classes
        self._weights = [c.weight for c in classes]

    # -- helpers --

    def _port(self, ip: str) -> int:
        p = self._ports.get(ip, EPHEMERAL_LO)
        self._ports[ip] = EPHEMERAL_LO if p >= EPHEMERAL_HI else p + 1
        return p

    def _log(self, kind, ts, ctx, msg, size, rid) -> None:
        last = self._last_ts.get(ctx)
        if last is not None and ts <= last:
            ts = last + 1
        self._last_ts[ctx] = ts
        a = Activity(kind, ts, ctx, msg, size, rid)
        self.events.append(a)
        self.truth.requests[rid].append(a)

    def _gap(self) -> int:
        return self.rng.randint(*self.FRAGMENT_GAP)

    def _transfer(self, src_ctx, dst_ctx, msg, size, send_parts, recv_parts, latency, rid, t0, not_before=0):
        """Log SEND fragments from ``t0`` and the matching RECEIVE fragments.

        Returns (last send time, last receive time). The receiver may start
        reading before the sender has written every fragment, but never reads
        bytes that have not arrived yet.
        """
        rng = self.rng
        sends = _composition(rng, size, rng.randint(*send_parts))
        recvs = _composition(rng, size, rng.randint(*recv_parts))
        t = t0
        avail = []  # (cumulative bytes, arrival time)
        cum = 0
        for i, part in enumerate(sends):
            if i:
                t += self._gap()
            self._log(SEND, t, src_ctx, msg, part, rid)
            cum += part
            avail.append((cum, t + latency))
        last_send = t
        r = None
        cum = 0
        k = 0
        for part in recvs:
            cum += part
            while avail[k][0] < cum:
                k += 1
            ready = avail[k][1]
            r = max(ready, not_before) if r is None else max(r + self._gap(), ready)
            self._log(RECEIVE, r, dst_ctx, msg, part, rid)
        return last_send, r

    # -- processes --

    def _serve(self, tier_idx: int, ctx: ContextId, rid: int, fanouts: tuple[int, ...]):
        tier = self.topo.tiers[tier_idx]
        rng = self.rng
        total = max(1, tier.service_time.sample(rng))
        calls = fanouts[tier_idx] if tier_idx + 1 < len(self.topo.tiers) else 0
        chunks = [total // (calls + 1)] * (calls + 1)
        chunks[-1] += total - sum(chunks)
        svc = self.truth.service_ns[rid]
        svc[tier.program] = svc.get(tier.program, 0) + total
        for k in range(calls):
            yield ("sleep", chunks[k])
            yield from self._call(tier_idx, ctx, rid, fanouts)
        yield ("sleep", chunks[-1])

    def _call(self, up_idx: int, up_ctx: ContextId, rid: int, fanouts):
        topo = self.topo
        up, down = topo.tiers[up_idx], topo.tiers[up_idx + 1]
        pool = self.pools[up_idx + 1]
        rng = self.rng
        msg = MessageId(up.ip, self._port(up.ip), down.ip, down.port)
        lat = down.link_latency.sample(rng)
        size = rng.randint(*down.message_size)
        now = self.sched.now
        # request leaves upstream; the worker is acquired when it lands
        first_arrival = now + lat
        yield ("until", first_arrival)
        worker = yield ("acquire", pool)
        ctx = pool.context(worker)
        start = self.sched.now
        lat_rec = self.truth.latency_ns[rid]
        key = f"{up.program}2{down.program}"
        lat_rec[key] = lat_rec.get(key, 0) + lat
        _, last_recv = self._transfer(
            up_ctx, ctx, msg, size, up.send_parts, down.receive_parts, lat, rid, now, not_before=start
        )
        yield ("until", last_recv)
        yield from self._serve(up_idx + 1, ctx, rid, fanouts)
        back = msg.reversed()
        rsize = rng.randint(*down.message_size)
        rlat = down.link_latency.sample(rng)
        key = f"{down.program}2{up.program}"
        lat_rec[key] = lat_rec.get(key, 0) + rlat
        last_send, last_recv = self._transfer(
            ctx, up_ctx, back, rsize, down.send_parts, up.receive_parts, rlat, rid, self.sched.now
        )
        yield ("until", last_send)
        yield ("release", pool, worker)
        yield ("until", last_recv)

    def _request(self, client_ip: str, cls: RequestClass):
        topo = self.topo
        self._rid += 1
        rid = self._rid
        self.truth.requests[rid] = []
        self.truth.classes[rid] = cls.name
        self.truth.service_ns[rid] = {}
        self.truth.latency_ns[rid] = {}
        entry = topo.entry
        pool = self.pools[0]
        rng = self.rng
        msg = MessageId(client_ip, self._port(client_ip), entry.ip, entry.port)
        lat = entry.link_latency.sample(rng)
        yield ("sleep", lat)
        worker = yield ("acquire", pool)
        ctx = pool.context(worker)
        self._log(BEGIN, self.sched.now, ctx, msg, rng.randint(*topo.clients.request_size), rid)
        yield ("sleep", self._gap())
        yield from self._serve(0, ctx, rid, topo.fanouts(cls))
        self._log(END, self.sched.now, ctx, msg.reversed(), rng.randint(*topo.clients.response_size), rid)
        yield ("sleep", self._gap())
        yield ("release", pool, worker)
        yield ("sleep", entry.link_latency.sample(rng))

    def _pick_class(self) -> RequestClass:
        if len(self._classes) == 1:
            return self._classes[0]
        return self.rng.choices(self._classes, weights=self._weights)[0]

    def _can_issue(self) -> bool:
        cap = self.topo.clients.requests
        return cap is None or self._issued < cap

    def _closed_client(self, i: int, n: int):
        c = self.topo.clients
        ip = c.ips[i % len(c.ips)]
        start = int(c.ramp_up * SEC * i / n)
        stop = int((c.ramp_up + c.steady) * SEC + c.ramp_down * SEC * i / n)
        yield ("until", start)
        while self.sched.now < stop and self._can_issue():
            self._issued += 1
            yield from self._request(ip, self._pick_class())
            yield ("sleep", c.think_time.sample(self.rng))

    def _open_arrivals(self):
        c = self.topo.clients
        end = c.duration_ns
        up, steady_end = c.ramp_up * SEC, (c.ramp_up + c.steady) * SEC
        mean_gap = SEC / c.rate
        i = 0
        while self._can_issue():
            yield ("sleep", max(1, int(self.rng.expovariate(1.0 / mean_gap))))
            now = self.sched.now
            if now >= end:
                return
            if now < up:
                keep = now / up
            elif now > steady_end:
                keep = (end - now) / (end - steady_end)
            else:
                keep = 1.0
            if keep < 1.0 and self.rng.random() >= keep:
                continue
            self._issued += 1
            ip = c.ips[i % len(c.ips)]
            i += 1
            yield ("spawn", self._request(ip, self._pick_class()))

    def run(self) -> None:
        c = self.topo.clients
        if c.rate is not None:
            self.sched.at(0, self._open_arrivals())
        else:
            for i in range(c.concurrent):
                self.sched.at(0, self._closed_client(i, c.concurrent))
        self.sched.run()


def _noise_events(proc: NoiseProcess, seed: int, index: int, end: int) -> list[Activity]:
    rng = random.Random(f"{seed}/noise/{index}")
    ctx = ContextId(proc.host, proc.program, proc.pid, proc.pid)
    out = []
    t = 0
    mean_gap = SEC / proc.rate
    port = 40000
    while True:
        t += max(1, int(rng.expovariate(1.0 / mean_gap)))
        if t >= end:
            return out
        port = port + 1 if port < 50000 else 40000
        if rng.random() < 0.5:
            kind, msg = SEND, MessageId(proc.ip, proc.port, proc.peer_ip, port)
        else:
            kind, msg = RECEIVE, MessageId(proc.peer_ip, port, proc.ip, proc.port)
        out.append(Activity(kind, t, ctx, msg, rng.randint(1, 1500)))


def _collection_mask(dist: DisturbanceSpec) -> Optional[Callable[[int], bool]]:
    if not dist.collection_windows:
        return None
    spans = []
    t = 0
    for _ in range(dist.rounds):
        for on, off in dist.collection_windows:
            spans.append((t, t + int(on * SEC)))
            t += int((on + off) * SEC)

    def collected(ts: int) -> bool:
        return any(lo <= ts < hi for lo, hi in spans)

    return collected


def delete_lines(items: Sequence, percent: float, rng: random.Random, selectable: Callable[[Any], bool]) -> list:
    """Remove ``round(percent%)`` of the selectable items, chosen uniformly."""
    if percent <= 0:
        return list(items)
    idx = [i for i, it in enumerate(items) if selectable(it)]
    k = len(idx) if percent >= 100 else int(round(len(idx) * percent / 100.0))
    gone = set(rng.sample(idx, k))
    return [it for i, it in enumerate(items) if i not in gone]


def generate(topo: Topology, dist: Optional[DisturbanceSpec] = None) -> SimulationResult:
    dist = dist or DisturbanceSpec()
    gen = _Generator(topo)
    gen.run()
    end = max((a.timestamp for a in gen.events), default=0) + 1

    by_host: dict[str, list[Activity]] = {}
    for t in topo.tiers:
        by_host.setdefault(t.host, [])
    for a in gen.events:
        by_host[a.context.host].append(a)
    for i, proc in enumerate(dist.noise_processes):
        by_host.setdefault(proc.host, []).extend(_noise_events(proc, topo.seed, i, end))

    collected = _collection_mask(dist)
    cpu_rng = random.Random(f"{topo.seed}/cpu")
    cpu_offsets: dict[tuple[str, int], int] = {}
    if dist.cpu_skew_ns:
        for host in sorted(by_host):
            for cpu in range(dist.cpus):
                cpu_offsets[(host, cpu)] = cpu_rng.randint(-dist.cpu_skew_ns, dist.cpu_skew_ns)

    logs: dict[str, list[Activity]] = {}
    for host in sorted(by_host):
        events = by_host[host]
        if collected is not None:
            events = [a for a in events if collected(a.timestamp)]
        if dist.deletion_percent > 0:
            target = dist.deletion_target
            events = delete_lines(
                events,
                dist.deletion_percent,
                random.Random(f"{topo.seed}/delete/{host}"),
                (lambda a: True) if target == "all" else (lambda a, t=target: a.context.program == t),
            )
        skew = dist.skew_for(host)
        shifted = []
        for a in events:
            off = skew
            if cpu_offsets:
                off += cpu_offsets[(host, a.context.tid % dist.cpus)]
            if off:
                a = Activity(a.kind, a.timestamp + off, a.context, a.message, a.size, a.truth_request_id)
            shifted.append(a)
        shifted.sort(key=lambda a: a.timestamp)  # stable: per-context order survives ties
        logs[host] = shifted
    return SimulationResult(topo, dist, gen.truth, logs, end)


def simulate(config: dict | Topology, dist: Optional[DisturbanceSpec] = None, seed: Optional[int] = None) -> SimulationResult:
    if isinstance(config, dict):
        topo, cfg_dist = topology_from_dict(config)
        dist = dist or cfg_dist
    else:
        topo = config
    if seed is not None:
        topo = _with_seed(topo, seed)
    return generate(topo, dist)


def _with_seed(topo: Topology, seed: int) -> Topology:
    return Topology(topo.tiers, topo.clients, topo.classes, seed)


def three_tier(
    service_ms: Sequence[float] = (10, 20, 30),
    requests: Optional[int] = 10,
    concurrent: int = 1,
    think_ms: float = 5.0,
    fanout: int = 1,
    pool_sizes: Sequence[int] = (8, 8, 8),
    fragments: bool = True,
    seed: int = 0,
    classes: tuple[RequestClass, ...] = (),
    link_us: Sequence[float] = (100, 100, 100),
    fixed: bool = True,
    steady: float = 3600.0,
) -> Topology:
    """Apache/JBoss/MySQL-shaped topology used throughout the tests and docs."""
    names = (("httpd", "nodeA", "10.0.0.1", 80), ("java", "nodeB", "10.0.0.2", 8009), ("mysqld", "nodeC", "10.0.0.3", 3306))
    tiers = []
    for i, (prog, host, ip, port) in enumerate(names):
        ms = service_ms[i]
        svc = (
            Distribution("fixed", value=int(ms * 1e6))
            if fixed
            else Distribution("uniform", low=int(ms * 0.5e6), high=int(ms * 1.5e6))
        )
        tiers.append(
            TierSpec(
                program=prog,
                host=host,
                ip=ip,
                port=port,
                pool_size=pool_sizes[i],
                service_time=svc,
                link_latency=Distribution("fixed", value=int(link_us[i] * US)),
                downstream_fanout=fanout,
                send_parts=(1, 2) if fragments else (1, 1),
                receive_parts=(1, 3) if fragments else (1, 1),
                pid=1000 * (i + 1),
            )
        )
    clients = ClientSpec(
        ips=("192.168.1.9", "192.168.1.10"),
        concurrent=concurrent,
        think_time=Distribution("fixed", value=int(think_ms * 1e6)),
        steady=steady,
        requests=requests,
    )
    return Topology(tuple(tiers), clients, classes, seed)
