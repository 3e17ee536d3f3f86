"""Time-space diagrams of CAGs in Graphviz DOT."""

from __future__ import annotations

from .engine import CAG, CONTEXT


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _label(v) -> str:
    text = f"{v.kind.name}\\n{v.size} B"
    if v.fragments > 1:
        text += f" ({v.fragments} frags)"
    return text + f"\\nt={v.timestamp}"


def to_dot(cag: CAG) -> str:
    """One lane per context, laid out left to right in timestamp order.

    Context edges run along a lane; message edges cross between lanes and are
    dashed. Output depends only on the CAG, so rendering twice is byte-identical.
    """
    lanes: dict = {}
    for v in sorted(cag.vertices, key=lambda v: (v.timestamp, v.index)):
        lanes.setdefault(v.context, []).append(v)

    out = [
        f"digraph cag_{cag.id} {{",
        "  rankdir=LR;",
        "  newrank=true;",
        '  node [shape=box, fontname="Helvetica", fontsize=10];',
        '  edge [fontname="Helvetica", fontsize=9];',
    ]
    if cag.degraded:
        out.append('  label="degraded"; labelloc=t;')
    for lane_no, (ctx, vs) in enumerate(lanes.items()):
        out.append(f"  subgraph cluster_{lane_no} {{")
        out.append(f"    label={_quote(str(ctx))};")
        out.append("    style=rounded; color=gray60;")
        for v in vs:
            out.append(f"    v{v.index} [label={_quote(_label(v))}];")
        out.append("  }")
    for s, d, kind in sorted(cag.edges):
        if kind == CONTEXT:
            out.append(f"  v{s} -> v{d} [weight=10];")
        else:
            out.append(f"  v{s} -> v{d} [style=dashed, color=blue, constraint=false];")
    out.append("}")
    return "\n".join(out) + "\n"
