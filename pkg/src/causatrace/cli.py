"""``causatrace`` command line: simulate, perturb, correlate, analyze, accuracy, render."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import shutil
import sys
import time
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

from .accuracy import score
from .activity import EntrySpec, LogParseError, format_raw_line, iter_raw_log
from .analyzer import classify, dominated, format_latency_table, format_pattern_table, pattern_rows
from .engine import Engine, correlate, read_cags, write_cags
from .ranker import NoiseFilter, Ranker
from .render import to_dot
from .simulator import ConfigError, DisturbanceSpec, GroundTruth, delete_lines, generate, load_config

log = logging.getLogger("causatrace")

EXIT_OK, EXIT_EMPTY, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(log_dir: Path) -> dict:
    p = log_dir / "manifest.json"
    if not p.exists():
        return {}
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


def load_streams(log_dir: Path) -> dict:
    """Read every ``*.log`` in ``log_dir``, grouped by host."""
    files = sorted(log_dir.glob("*.log"))
    if not files:
        raise CliError(f"{log_dir}: no *.log files found")
    streams: dict = defaultdict(list)
    for f in files:
        try:
            for a in iter_raw_log(f):
                streams[a.node].append(a)
        except LogParseError as exc:
            raise CliError(f"{f}: {exc}") from None
        except OSError as exc:
            raise CliError(f"{f}: {exc}") from None
    for acts in streams.values():
        acts.sort(key=lambda a: a.timestamp)
    return dict(streams)


# -- subcommands -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    path = Path(args.config)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    try:
        topo, dist, cfg = load_config(path)
    except ConfigError as exc:
        raise CliError(f"{path}: {exc}") from None
    if args.seed is not None:
        cfg = dict(cfg, seed=args.seed)
        topo = type(topo)(topo.tiers, topo.clients, topo.classes, args.seed)
    if args.collect_on is not None or args.collect_off is not None:
        if args.collect_on is None or args.collect_off is None:
            raise CliError("--collect-on and --collect-off go together")
        windows = ((args.collect_on, args.collect_off),)
        dist = DisturbanceSpec(
            dist.noise_processes, dist.clock_skew_ns, dist.deletion_percent, dist.deletion_target,
            windows, args.rounds, dist.cpus, dist.cpu_skew_ns,
        )
        cfg = dict(cfg, sampling={"on": args.collect_on, "off": args.collect_off, "rounds": args.rounds})
    res = generate(topo, dist)
    manifest = res.write(args.out_dir, cfg)
    print(f"wrote {len(manifest['files'])} logs and {manifest['requests']} ground-truth requests to {args.out_dir}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    if not 0 <= args.delete_percent <= 100:
        raise CliError("--delete-percent must be within [0, 100]")
    src, dst = Path(args.log_dir), Path(args.out_dir)
    logs = sorted(src.glob("*.log"))
    if not logs:
        raise CliError(f"{src}: no *.log files found")
    per_file = {f: list(iter_raw_log(f)) for f in logs}
    programs = {a.context.program for acts in per_file.values() for a in acts}
    target = args.component
    if target != "all" and target not in programs:
        raise CliError(f"unknown component {target!r}; known: {', '.join(sorted(programs))}")
    dst.mkdir(parents=True, exist_ok=True)
    removed = 0
    for f, acts in per_file.items():
        if args.delete_percent == 0:
            shutil.copyfile(f, dst / f.name)
            continue
        rng = random.Random(f"{args.seed}/perturb/{f.name}")
        keep = delete_lines(
            acts, args.delete_percent, rng,
            (lambda a: True) if target == "all" else (lambda a: a.context.program == target),
        )
        removed += len(acts) - len(keep)
        with open(dst / f.name, "w", encoding="utf-8") as fh:
            for a in keep:
                fh.write(format_raw_line(a) + "\n")
    for f in sorted(src.iterdir()):
        if f.is_file() and f.suffix != ".log":
            shutil.copyfile(f, dst / f.name)
    print(f"removed {removed} lines; output in {dst}")
    return EXIT_OK


def _entry_spec(args, manifest: dict) -> EntrySpec:
    m = manifest.get("entry", {})
    program = args.entry_program if args.entry_program is not None else m.get("program")
    ports = args.entry_port or m.get("ports") or [80]
    ips = args.service_ip or m.get("service_ips") or []
    return EntrySpec(program, frozenset(int(p) for p in ports), frozenset(ips))


def cmd_correlate(args) -> int:
    log_dir = Path(args.log_dir)
    if not log_dir.is_dir():
        raise CliError(f"{log_dir}: not a directory")
    manifest = {} if args.no_manifest else _read_manifest(log_dir)
    streams = load_streams(log_dir)
    programs = args.program or ([] if args.all_programs else manifest.get("programs", []))
    nf = NoiseFilter(
        programs=frozenset(programs),
        deny_programs=frozenset(args.deny_program or ()),
        deny_ips=frozenset(args.deny_ip or ()),
        deny_ports=frozenset(args.deny_port or ()),
    )
    engine = Engine()
    t0 = time.perf_counter()
    ranker = Ranker(
        streams, engine, window_ms=args.window_ms, entry=_entry_spec(args, manifest),
        noise_filter=nf, reference_node=args.reference_node,
    )
    cags = list(correlate(ranker, engine))
    elapsed = time.perf_counter() - t0
    out = Path(args.out) if args.out else log_dir / "cags.jsonl"
    n = write_cags(cags + ([] if args.complete_only else engine.incomplete), out)
    stats = engine.stats.as_dict()
    if stats["filtered"] and not cags and not engine.incomplete:
        log.warning("no activities left after filtering")
    for k in ("complete", "incomplete", "degraded", "orphans", "discarded_receives", "dropped_receives", "swaps", "filtered"):
        print(f"{k:>20}: {stats[k]}")
    print(f"{'seconds':>20}: {elapsed:.3f}")
    print(f"wrote {n} CAGs to {out}")
    if args.stats:
        _write_json(Path(args.stats), dict(stats, seconds=elapsed, skew_offsets_ns=ranker.skew_offsets))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cags = _load_cags(args.cags)
    patterns = classify((c for c in cags if c.complete), include_degraded=args.include_degraded)
    if not patterns:
        print("no complete CAGs to analyze", file=sys.stderr)
        return EXIT_EMPTY
    top = dominated(patterns, args.top_k)
    rows = pattern_rows(top)
    print(format_pattern_table(rows))
    print()
    print(format_latency_table(rows))
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report = {
            "total_complete": sum(p.count for p in patterns),
            "patterns": len(patterns),
            "top_k": args.top_k,
            "include_degraded": args.include_degraded,
            "dominated": [dict(r, signature=[list(x) for x in p.signature]) for r, p in zip(rows, top)],
        }
        _write_json(out / "patterns.json", report)
        with open(out / "segments.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "digest", "count", "fraction", "position", "label", "kind", "mean_ns", "percentage", "approximate"])
            for r in rows:
                for i, s in enumerate(r["segments"]):
                    w.writerow([r["rank"], r["digest"], r["count"], f"{r['fraction']:.6f}", i, s["label"],
                                s["kind"], f"{s['mean_ns']:.1f}", f"{s['percentage']:.4f}", int(s["approximate"])])
        if not args.no_plots:
            from .plotting import plot_latency_percentages, plot_pattern_counts

            plot_pattern_counts(rows, out / "patterns.png")
            plot_latency_percentages(rows, out / "latency.png")
        print(f"\nreport written to {out}")
    return EXIT_OK


def cmd_accuracy(args) -> int:
    cags = _load_cags(args.cags)
    tp = Path(args.truth)
    if not tp.exists():
        raise CliError(f"truth file not found: {tp}")
    rep = score(cags, GroundTruth.read(tp))
    for k, v in rep.as_dict().items():
        print(f"{k:>18}: {v:.4f}" if isinstance(v, float) else f"{k:>18}: {v}")
    if args.out:
        _write_json(Path(args.out), rep.as_dict())
    return EXIT_OK


def cmd_render(args) -> int:
    cags = _load_cags(args.cags)
    match = [c for c in cags if c.id == args.cag_id]
    if not match:
        raise CliError(f"no CAG with id {args.cag_id}", EXIT_EMPTY)
    dot = to_dot(match[0])
    if args.out:
        Path(args.out).write_text(dot, encoding="utf-8")
    else:
        sys.stdout.write(dot)
    return EXIT_OK


def _load_cags(path: str):
    p = Path(path)
    if not p.exists():
        raise CliError(f"CAG file not found: {p}")
    try:
        return read_cags(p)
    except (ValueError, KeyError) as exc:
        raise CliError(f"{p}: unreadable CAG file ({exc})") from None


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causatrace", description="Request causal path tracing from send/receive logs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate per-host logs and ground truth from a topology config")
    s.add_argument("config")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--collect-on", type=float, help="seconds collected per sampling round")
    s.add_argument("--collect-off", type=float, help="seconds skipped per sampling round")
    s.add_argument("--rounds", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("perturb", help="copy logs with random line deletion")
    s.add_argument("log_dir")
    s.add_argument("out_dir")
    s.add_argument("--delete-percent", type=float, required=True)
    s.add_argument("--component", default="all", help="program name, or 'all'")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("correlate", help="build CAGs from raw logs")
    s.add_argument("log_dir")
    s.add_argument("-o", "--out", help="CAG output (default: LOG_DIR/cags.jsonl)")
    s.add_argument("--window-ms", type=float, default=20.0)
    s.add_argument("--entry-program")
    s.add_argument("--entry-port", type=int, action="append")
    s.add_argument("--service-ip", action="append")
    s.add_argument("--program", action="append", help="only keep these programs (repeatable)")
    s.add_argument("--all-programs", action="store_true", help="ignore the manifest's program list")
    s.add_argument("--deny-program", action="append")
    s.add_argument("--deny-ip", action="append")
    s.add_argument("--deny-port", type=int, action="append")
    s.add_argument("--reference-node")
    s.add_argument("--no-manifest", action="store_true")
    s.add_argument("--complete-only", action="store_true", help="do not write incomplete CAGs")
    s.add_argument("--stats", help="write session statistics as JSON")
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("analyze", help="dominated patterns and latency breakdown")
    s.add_argument("cags")
    s.add_argument("--top-k", type=int, default=10)
    s.add_argument("--include-degraded", action="store_true")
    s.add_argument("--out-dir", help="write patterns.json, segments.csv and figures here")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("accuracy", help="score CAGs against ground truth")
    s.add_argument("cags")
    s.add_argument("truth")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_accuracy)

    s = sub.add_parser("render", help="DOT time-space diagram of one CAG")
    s.add_argument("cags")
    s.add_argument("cag_id", type=int)
    s.add_argument("--format", choices=["dot"], default="dot")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_render)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "top_k", 1) < 1:
        print("causatrace: --top-k must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"causatrace {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
