"""Stable serialization of planner outputs and trace rendering.

All JSON emitted here is canonical: keys sorted, floats at 6 significant
digits, no whitespace variation. Re-emitting a parsed report reproduces
it byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math

from . import __version__
from .errors import EmptyTrace
from .pipe_sim import ScheduleTrace

_EVENT_CLASSES = {
    "forward": "fwd",
    "backward": "bwd",
    "recompute": "rc",
    "send_recv": "comm",
}

_EVENT_COLORS = {
    "forward": "#4c9ed9",
    "backward": "#63b56b",
    "recompute": "#e0a23c",
    "send_recv": "#9b9b9b",
}

_EVENT_GLYPHS = {"forward": "F", "backward": "B", "recompute": "r", "send_recv": "-"}


def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError("reports cannot contain NaN or infinite values")
    if x == 0:
        x = 0.0  # normalize -0.0
    return format(x, ".6g")


def canonical_json(obj) -> str:
    """Render nested dicts/lists/scalars deterministically."""
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=True)
    if isinstance(obj, dict):
        items = []
        for key in sorted(obj):
            if not isinstance(key, str):
                raise TypeError("canonical JSON requires string keys")
            items.append(f"{json.dumps(key)}: {canonical_json(obj[key])}")
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(canonical_json(x) for x in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def inputs_digest(*parts) -> str:
    """Deterministic sha256 over the canonicalized inputs."""
    h = hashlib.sha256()
    for part in parts:
        h.update(canonical_json(part).encode())
        h.update(b"\x00")
    return h.hexdigest()


def strategy_to_dict(strategy) -> dict:
    return {
        "dp": strategy.dp,
        "tp": strategy.tp,
        "pp": strategy.pp,
        "vpp": strategy.vpp,
        "ep": strategy.ep,
        "op": strategy.op,
        "micro_batch_size": strategy.micro_batch_size,
        "num_micro_batches": strategy.num_micro_batches,
        "sp_enabled": strategy.sp_enabled,
    }


def memory_to_dict(memory) -> dict:
    return {
        "params_bytes": memory.params,
        "gradients_bytes": memory.gradients,
        "optimizer_states_bytes": memory.optimizer_states,
        "activations_bytes": memory.activations,
        "total_bytes": memory.total,
    }


def estimate_to_dict(estimate) -> dict:
    return {
        "compute_sec": estimate.compute_sec,
        "bubble_sec": estimate.bubble_sec,
        "dp_comm_sec": estimate.dp_comm_sec,
        "tp_comm_sec": estimate.tp_comm_sec,
        "ep_comm_sec": estimate.ep_comm_sec,
        "pp_comm_sec": estimate.pp_comm_sec,
        "step_time_sec": estimate.step_time_sec,
        "memory": memory_to_dict(estimate.memory),
    }


def plan_to_dict(plan) -> dict:
    return {
        "pipeline_stages": plan.pipeline_stages,
        "virtual_chunks": plan.virtual_chunks,
        "layer_counts": [list(row) for row in plan.layer_counts],
        "recompute": [list(row) for row in plan.recompute],
        "embedding_stage": plan.embedding_stage,
        "head_stage": plan.head_stage,
    }


def balance_to_dict(result) -> dict:
    return {
        "plan": plan_to_dict(result.plan),
        "objective_sec": result.objective_sec,
        "per_stage_memory": [memory_to_dict(m) for m in result.per_stage_memory],
        "proven_optimal": result.proven_optimal,
    }


def trace_to_dict(trace: ScheduleTrace) -> dict:
    return {
        "schedule": trace.schedule,
        "pipeline_stages": trace.pipeline_stages,
        "virtual_chunks": trace.virtual_chunks,
        "micro_batches": trace.micro_batches,
        "makespan_sec": trace.makespan_sec,
        "bubble_ratio": trace.bubble_ratio,
        "peak_inflight": [list(row) for row in trace.peak_inflight],
        "events": [
            {
                "stage": e.stage,
                "chunk": e.chunk,
                "microbatch": e.microbatch,
                "kind": e.kind,
                "start_sec": e.start_sec,
                "end_sec": e.end_sec,
            }
            for e in trace.events
        ],
    }


def ranked_to_dict(candidate) -> dict:
    return {
        "rank": candidate.rank,
        "feasible": candidate.feasible,
        "recompute_mode": candidate.recompute_mode,
        "strategy": strategy_to_dict(candidate.strategy),
        "estimate": estimate_to_dict(candidate.estimate),
    }


def build_plan_report(digest, candidates, chosen, traces=None) -> dict:
    return {
        "tool_version": __version__,
        "inputs_digest": digest,
        "candidates": [ranked_to_dict(c) for c in candidates],
        "chosen": balance_to_dict(chosen) if chosen is not None else None,
        "traces": list(traces) if traces else [],
    }


def emit_report(report: dict) -> str:
    """Canonical JSON document, newline-terminated."""
    return canonical_json(report) + "\n"


def render_gantt(trace: ScheduleTrace, format: str = "svg") -> str:
    if not trace.events:
        raise EmptyTrace("cannot render an empty trace")
    if format == "svg":
        return _render_svg(trace)
    if format == "text":
        return _render_text(trace)
    raise ValueError(f"unknown gantt format {format!r}")


def _render_svg(trace: ScheduleTrace) -> str:
    lane_h = 28
    lane_gap = 6
    label_w = 64
    width = 960
    p = trace.pipeline_stages
    span = max(trace.makespan_ns, 1)
    scale = (width - label_w - 10) / span
    height = p * (lane_h + lane_gap) + lane_gap + 24
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'viewBox="0 0 {width} {height}" width="{width}" height="{height}">',
        "<style>text{font-family:monospace;font-size:10px}"
        ".lane{fill:#f3f3f3}.evt{stroke:#333;stroke-width:0.4}</style>",
    ]
    for s in range(p):
        y = lane_gap + s * (lane_h + lane_gap)
        out.append(
            f'<rect class="lane" x="{label_w}" y="{y}" '
            f'width="{width - label_w - 10}" height="{lane_h}"/>'
        )
        out.append(f'<text x="4" y="{y + lane_h / 2 + 3}">stage {s}</text>')
    for e in sorted(trace.events, key=lambda ev: (ev.stage, ev.start_ns, ev.kind, ev.chunk, ev.microbatch)):
        y = lane_gap + e.stage * (lane_h + lane_gap)
        x = label_w + e.start_ns * scale
        w = max((e.end_ns - e.start_ns) * scale, 0.5)
        color = _EVENT_COLORS[e.kind]
        cls = _EVENT_CLASSES[e.kind]
        if e.kind == "send_recv":
            y += lane_h * 0.65
            h = lane_h * 0.35
        else:
            h = lane_h
        out.append(
            f'<rect class="evt {cls}" x="{x:.2f}" y="{y:.2f}" '
            f'width="{w:.2f}" height="{h:.2f}" fill="{color}"/>'
        )
        if w > 18 and e.kind in ("forward", "backward"):
            out.append(
                f'<text x="{x + 1.5:.2f}" y="{y + h / 2 + 3:.2f}">'
                f"{e.microbatch}.{e.chunk}</text>"
            )
    legend_y = height - 8
    x = label_w
    for kind in ("forward", "backward", "recompute", "send_recv"):
        out.append(
            f'<rect x="{x}" y="{legend_y - 9}" width="10" height="10" '
            f'fill="{_EVENT_COLORS[kind]}"/>'
        )
        out.append(f'<text x="{x + 13}" y="{legend_y}">{kind}</text>')
        x += 110
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _render_text(trace: ScheduleTrace, columns: int = 96) -> str:
    p = trace.pipeline_stages
    span = max(trace.makespan_ns, 1)
    rows = []
    for s in range(p):
        cells = [" "] * columns
        for e in trace.events:
            if e.stage != s or e.kind == "send_recv":
                continue
            lo = int(e.start_ns * columns / span)
            hi = max(int(e.end_ns * columns / span), lo + 1)
            for x in range(lo, min(hi, columns)):
                cells[x] = _EVENT_GLYPHS[e.kind]
        rows.append(f"stage {s:>2} |" + "".join(cells) + "|")
    header = f"makespan {trace.makespan_sec:.6g}s  bubble {trace.bubble_ratio:.4f}"
    return header + "\n" + "\n".join(rows) + "\n"
