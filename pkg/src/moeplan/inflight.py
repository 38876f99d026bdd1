"""Peak in-flight activation counts per (stage, chunk), computed symbolically.

A microbatch is in flight on (stage, chunk) from the end of its forward
until the start of its backward there. The tables below follow from the
schedule orders alone (id arithmetic over warmup/steady/cooldown phases),
never from a simulated trace, so they can serve as an independent check
against trace measurements.
"""

from __future__ import annotations

from .errors import UnsupportedSchedule

SCHEDULE_KINDS = ("gpipe", "one_f_one_b", "interleaved_1f1b", "interleaved_1f1b_overlap")


def validate_schedule_shape(kind: str, p: int, v: int, m: int) -> None:
    """Reject (kind, p, v, m) combinations that have no defined order."""
    if kind not in SCHEDULE_KINDS:
        raise UnsupportedSchedule(f"unknown schedule kind {kind!r}")
    if p < 1 or v < 1 or m < 1:
        raise UnsupportedSchedule("p, v, m must all be >= 1")
    if kind == "one_f_one_b" and v != 1:
        raise UnsupportedSchedule("one_f_one_b is defined for v=1 only")
    if kind.startswith("interleaved") and v > 1 and m % p != 0:
        raise UnsupportedSchedule(
            f"interleaved schedules need micro-batches divisible by stages (m={m}, p={p})"
        )


def _interleaved_peak(p: int, v: int, m: int, s: int, c: int) -> int:
    # Virtual ids run chunk-blocked in groups of p*v: within one group, ids
    # [c*p, (c+1)*p) are forwards of chunk c; backwards reverse the chunk
    # order. Warmup length is 2*(p-s-1) + (v-1)*p except for m == p, where
    # every forward precedes every backward.
    total = m * v
    if m == p:
        return m
    warmup = min(total, 2 * (p - s - 1) + (v - 1) * p)
    b_burst_start = (v - 1 - c) * p
    peak = 0
    for g in range(m // p):
        last_f = g * p * v + (c + 1) * p - 1
        done_f = (g + 1) * p
        started_b_limit = last_f - warmup  # backward ids < this have started
        started = 0
        for h in range(m // p):
            lo = h * p * v + b_burst_start
            started += max(0, min(started_b_limit - lo, p))
        peak = max(peak, done_f - started)
    return min(peak, m)


def inflight_table(p: int, v: int, m: int, schedule: str) -> list[list[int]]:
    """Peak stored-forward counts, one entry per (stage, chunk).

    Must agree exactly with counts measured from simulator traces; the
    pipeline test suite asserts that equality over the full shape sweep.
    """
    validate_schedule_shape(schedule, p, v, m)
    if schedule == "gpipe":
        return [[m] * v for _ in range(p)]
    if schedule == "one_f_one_b" or v == 1:
        return [[min(m, p - s)] for s in range(p)]
    return [[_interleaved_peak(p, v, m, s, c) for c in range(v)] for s in range(p)]
