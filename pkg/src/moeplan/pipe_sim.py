"""Deterministic event simulation of pipeline schedules.

Each schedule is a fixed per-stage operation order (the way real pipeline
engines execute); timing then follows from data dependencies and resource
serialization alone. Time is integer nanoseconds internally so event
ordering and the derived ratios are exact.

Modeling notes:
  - Recompute runs immediately before its backward on the compute resource
    but only depends on its own forward, so it can fill bubbles while the
    incoming gradient is still in flight.
  - Non-overlap schedules place every boundary transfer on the sender's
    compute resource; the *_overlap schedule moves transfers to one
    dedicated communication channel per stage (that stage's outgoing sends
    serialize there; receives never block a channel).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import EmptyTrace, InconsistentPlan
from .inflight import SCHEDULE_KINDS, validate_schedule_shape

_NS = 1_000_000_000


@dataclass(frozen=True)
class Durations:
    """Per-(stage, chunk) forward/backward/recompute seconds."""

    fwd_sec: tuple[tuple[float, ...], ...]
    bwd_sec: tuple[tuple[float, ...], ...]
    recompute_sec: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        p = len(self.fwd_sec)
        if p == 0:
            raise InconsistentPlan("durations need at least one stage")
        v = len(self.fwd_sec[0])
        for matrix in (self.fwd_sec, self.bwd_sec, self.recompute_sec):
            if len(matrix) != p or any(len(row) != v for row in matrix):
                raise InconsistentPlan("duration matrices must share one p x v shape")
            for row in matrix:
                if any(x < 0 for x in row):
                    raise InconsistentPlan("durations must be >= 0")

    @property
    def pipeline_stages(self) -> int:
        return len(self.fwd_sec)

    @property
    def virtual_chunks(self) -> int:
        return len(self.fwd_sec[0])

    @classmethod
    def uniform(cls, p: int, v: int, fwd: float, bwd: float, recompute: float = 0.0):
        return cls(
            tuple(tuple(fwd for _ in range(v)) for _ in range(p)),
            tuple(tuple(bwd for _ in range(v)) for _ in range(p)),
            tuple(tuple(recompute for _ in range(v)) for _ in range(p)),
        )


@dataclass(frozen=True)
class TaskEvent:
    stage: int
    chunk: int
    microbatch: int
    kind: str  # forward | backward | recompute | send_recv
    start_ns: int
    end_ns: int

    @property
    def start_sec(self) -> float:
        return self.start_ns / _NS

    @property
    def end_sec(self) -> float:
        return self.end_ns / _NS


@dataclass(frozen=True)
class ScheduleTrace:
    events: tuple[TaskEvent, ...]
    makespan_ns: int
    bubble_ratio: float
    peak_inflight: tuple[tuple[int, ...], ...]
    pipeline_stages: int
    virtual_chunks: int
    micro_batches: int
    schedule: str

    @property
    def makespan_sec(self) -> float:
        return self.makespan_ns / _NS


def _virtual_forward(p, v, vid):
    group, j = divmod(vid, p * v)
    return j // p, group * p + j % p  # (chunk, microbatch)


def _virtual_backward(p, v, vid):
    group, j = divmod(vid, p * v)
    return v - 1 - j // p, group * p + j % p


def _stage_order(kind, p, v, m, s):
    """Static (op, chunk, microbatch) order executed by stage s."""
    if kind == "gpipe":
        order = [("F", c, mb) for c in range(v) for mb in range(m)]
        order += [("B", c, mb) for c in reversed(range(v)) for mb in range(m)]
        return order
    total = m * v
    if kind == "one_f_one_b" or v == 1:
        warmup = min(m, p - s - 1)
    elif m == p:
        warmup = total
    else:
        warmup = min(total, 2 * (p - s - 1) + (v - 1) * p)
    order = []
    for vid in range(warmup):
        c, mb = _virtual_forward(p, v, vid)
        order.append(("F", c, mb))
    for i in range(total - warmup):
        c, mb = _virtual_forward(p, v, warmup + i)
        order.append(("F", c, mb))
        c, mb = _virtual_backward(p, v, i)
        order.append(("B", c, mb))
    for vid in range(total - warmup, total):
        c, mb = _virtual_backward(p, v, vid)
        order.append(("B", c, mb))
    return order


def _forward_upstream(p, v, s, c):
    if s > 0:
        return (s - 1, c)
    if c > 0:
        return (p - 1, c - 1)
    return None


def simulate(
    durations: Durations,
    micro_batches: int,
    comm_sec: float = 0.0,
    kind: str = "one_f_one_b",
) -> ScheduleTrace:
    """Run one schedule and return its timed trace.

    ``comm_sec`` is the per-boundary activation/gradient transfer time.
    """
    p, v, m = durations.pipeline_stages, durations.virtual_chunks, micro_batches
    validate_schedule_shape(kind, p, v, m)
    if comm_sec < 0:
        raise InconsistentPlan("comm_sec must be >= 0")

    overlap = kind == "interleaved_1f1b_overlap"
    comm_ns = round(comm_sec * _NS)
    with_comm = comm_ns > 0
    fwd_ns = [[round(x * _NS) for x in row] for row in durations.fwd_sec]
    bwd_ns = [[round(x * _NS) for x in row] for row in durations.bwd_sec]
    rc_ns = [[round(x * _NS) for x in row] for row in durations.recompute_sec]

    def fwd_dest(s, c):
        if s < p - 1:
            return (s + 1, c)
        if c < v - 1:
            return (0, c + 1)
        return None

    def bwd_dest(s, c):
        if s > 0:
            return (s - 1, c)
        if c > 0:
            return (p - 1, c - 1)
        return None

    # Build compute orders (with recompute ops) and per-stage send orders.
    compute_order = []
    for s in range(p):
        ops = []
        for op, c, mb in _stage_order(kind, p, v, m, s):
            if op == "B" and rc_ns[s][c] > 0:
                ops.append(("R", c, mb))
            ops.append((op, c, mb))
            if with_comm:
                dest = fwd_dest(s, c) if op == "F" else bwd_dest(s, c)
                if dest is not None and not overlap:
                    ops.append(("S", c, mb) if op == "F" else ("T", c, mb))
        compute_order.append(ops)
    send_order = [[] for _ in range(p)]
    if with_comm and overlap:
        for s in range(p):
            for op, c, mb in compute_order[s]:
                if op == "F" and fwd_dest(s, c) is not None:
                    send_order[s].append(("S", c, mb))
                elif op == "B" and bwd_dest(s, c) is not None:
                    send_order[s].append(("T", c, mb))

    end: dict[tuple, int] = {}

    def dep_keys(s, op, c, mb):
        deps = []
        if op == "F":
            up = _forward_upstream(p, v, s, c)
            if up is not None:
                us, uc = up
                deps.append(("S", us, uc, mb) if with_comm else ("F", us, uc, mb))
        elif op == "R":
            deps.append(("F", s, c, mb))
        elif op == "B":
            deps.append(("F", s, c, mb))
            if rc_ns[s][c] > 0:
                deps.append(("R", s, c, mb))
            if s < p - 1:
                src = (s + 1, c)
            elif c < v - 1:
                src = (0, c + 1)
            else:
                src = None
            if src is not None:
                deps.append(("T", src[0], src[1], mb) if with_comm else ("B", src[0], src[1], mb))
        elif op == "S":
            deps.append(("F", s, c, mb))
        elif op == "T":
            deps.append(("B", s, c, mb))
        return deps

    def op_duration(s, op, c):
        if op == "F":
            return fwd_ns[s][c]
        if op == "B":
            return bwd_ns[s][c]
        if op == "R":
            return rc_ns[s][c]
        return comm_ns

    resources = [("c", s) for s in range(p)]
    if overlap and with_comm:
        resources += [("x", s) for s in range(p)]
    queue = {("c", s): compute_order[s] for s in range(p)}
    for s in range(p):
        if overlap and with_comm:
            queue[("x", s)] = send_order[s]
    ptr = {r: 0 for r in queue}
    free = {r: 0 for r in queue}
    events = []
    total = sum(len(q) for q in queue.values())
    done = 0
    moved = True
    while done < total:
        if not moved:
            raise InconsistentPlan("schedule deadlocked; inconsistent order")
        moved = False
        for res in resources:
            ops = queue[res]
            while ptr[res] < len(ops):
                op, c, mb = ops[ptr[res]]
                s = res[1]
                deps = dep_keys(s, op, c, mb)
                ends = []
                blocked = False
                for d in deps:
                    if d not in end:
                        blocked = True
                        break
                    ends.append(end[d])
                if blocked:
                    break
                start = max([free[res]] + ends)
                finish = start + op_duration(s, op, c)
                end[(op, s, c, mb)] = finish
                free[res] = finish
                ptr[res] += 1
                done += 1
                moved = True
                kind_name = {
                    "F": "forward",
                    "B": "backward",
                    "R": "recompute",
                    "S": "send_recv",
                    "T": "send_recv",
                }[op]
                events.append(TaskEvent(s, c, mb, kind_name, start, finish))

    makespan = max(e.end_ns for e in events) if events else 0
    busy = [0] * p
    for e in events:
        if e.kind in ("forward", "backward", "recompute"):
            busy[e.stage] += e.end_ns - e.start_ns
    bottleneck = max(busy)
    ratio = (makespan - bottleneck) / makespan if makespan > 0 else 0.0
    return ScheduleTrace(
        events=tuple(events),
        makespan_ns=makespan,
        bubble_ratio=ratio,
        peak_inflight=_peak_from_events(events, p, v),
        pipeline_stages=p,
        virtual_chunks=v,
        micro_batches=m,
        schedule=kind,
    )


def _peak_from_events(events, p, v):
    deltas: dict[tuple[int, int], list] = {(s, c): [] for s in range(p) for c in range(v)}
    for e in events:
        if e.kind == "forward":
            deltas[(e.stage, e.chunk)].append((e.end_ns, 0, 1))
        elif e.kind == "backward":
            deltas[(e.stage, e.chunk)].append((e.start_ns, 1, -1))
    table = []
    for s in range(p):
        row = []
        for c in range(v):
            running = peak = 0
            for _, _, delta in sorted(deltas[(s, c)]):
                running += delta
                peak = max(peak, running)
            row.append(peak)
        table.append(tuple(row))
    return tuple(table)


def measure_inflight(trace: ScheduleTrace) -> tuple[tuple[int, ...], ...]:
    """Peak stored-forward count per (stage, chunk), measured from the trace.

    A microbatch counts from the end of its forward until the start of its
    backward; simultaneous forward-end/backward-start boundaries resolve
    +1-before--1, matching the resource order that produced them.
    """
    return _peak_from_events(trace.events, trace.pipeline_stages, trace.virtual_chunks)


def compare_overlap(
    durations: Durations, micro_batches: int, comm_sec: float
) -> tuple[ScheduleTrace, ScheduleTrace]:
    """(baseline, overlapped) traces of the interleaved schedule."""
    base = simulate(durations, micro_batches, comm_sec, "interleaved_1f1b")
    over = simulate(durations, micro_batches, comm_sec, "interleaved_1f1b_overlap")
    return base, over


def schedule_kinds() -> tuple[str, ...]:
    return SCHEDULE_KINDS


def require_events(trace: ScheduleTrace) -> None:
    if not trace.events:
        raise EmptyTrace("trace has no events")
