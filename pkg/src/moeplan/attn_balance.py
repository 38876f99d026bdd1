"""Attention cost of packed samples and balanced redistribution.

Sequences concatenated from several documents mask out cross-document
attention, so equal-length samples can carry very different attention
work. The balancer permutes whole samples across devices (never their
contents) to level that work.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeMismatch, ValidationError


@dataclass(frozen=True)
class SampleSpec:
    """One packed training sample: document lengths summing to total_len."""

    doc_lengths: tuple[int, ...]
    total_len: int

    def __post_init__(self):
        if not self.doc_lengths:
            raise ValidationError("doc_lengths", "must not be empty")
        if any(x < 1 for x in self.doc_lengths):
            raise ValidationError("doc_lengths", "every document needs >= 1 token")
        if sum(self.doc_lengths) != self.total_len:
            raise ValidationError(
                "total_len",
                f"{self.total_len} != sum(doc_lengths) = {sum(self.doc_lengths)}",
            )

    @classmethod
    def from_lengths(cls, doc_lengths) -> "SampleSpec":
        lengths = tuple(int(x) for x in doc_lengths)
        return cls(lengths, sum(lengths))


@dataclass(frozen=True)
class Assignment:
    """sample index -> device, plus resulting per-device cost totals."""

    device_of_sample: tuple[int, ...]
    loads: tuple[int, ...]
    samples_per_device: int


def sample_cost(sample: SampleSpec) -> int:
    """Causal attention score count with cross-document masking.

    Token j of a document attends to tokens 0..j of the same document,
    so each document of length L contributes L*(L+1)/2.
    """
    return sum(L * (L + 1) // 2 for L in sample.doc_lengths)


def _loads_from(costs, device_of_sample, num_devices):
    loads = [0] * num_devices
    for i, dev in enumerate(device_of_sample):
        loads[dev] += costs[i]
    return loads


def _swap_refine(costs, assignment, num_devices):
    """Single-swap descent: accept the swap that most lowers the sorted
    load vector (lexicographically); ties pick the smallest sample pair."""
    assignment = list(assignment)
    loads = _loads_from(costs, assignment, num_devices)
    n = len(assignment)
    while True:
        current_profile = tuple(sorted(loads, reverse=True))
        best_choice = None
        for i in range(n):
            for j in range(i + 1, n):
                a, b = assignment[i], assignment[j]
                if a == b:
                    continue
                delta = costs[i] - costs[j]
                new_loads = loads.copy()
                new_loads[a] -= delta
                new_loads[b] += delta
                profile = tuple(sorted(new_loads, reverse=True))
                if profile < current_profile:
                    choice = (profile, i, j)
                    if best_choice is None or choice < best_choice:
                        best_choice = choice
        if best_choice is None:
            return assignment, loads
        _, i, j = best_choice
        assignment[i], assignment[j] = assignment[j], assignment[i]
        loads = _loads_from(costs, assignment, num_devices)


def balance_samples(
    samples: list[SampleSpec], num_devices: int, samples_per_device: int
) -> Assignment:
    """Cardinality-constrained min-max partition of samples by cost.

    Longest-processing-time greedy under the per-device sample quota,
    then pairwise-swap refinement to a local optimum. Never returns an
    assignment with a higher peak load than the identity layout.
    """
    if num_devices < 1 or samples_per_device < 1:
        raise ShapeMismatch("num_devices and samples_per_device must be >= 1")
    if len(samples) != num_devices * samples_per_device:
        raise ShapeMismatch(
            f"{len(samples)} samples cannot tile {num_devices} devices "
            f"x {samples_per_device} samples each"
        )
    costs = [sample_cost(s) for s in samples]
    order = sorted(range(len(samples)), key=lambda i: (-costs[i], i))
    assignment = [0] * len(samples)
    loads = [0] * num_devices
    capacity = [samples_per_device] * num_devices
    for i in order:
        dev = min(
            (d for d in range(num_devices) if capacity[d] > 0),
            key=lambda d: (loads[d], d),
        )
        assignment[i] = dev
        loads[dev] += costs[i]
        capacity[dev] -= 1
    assignment, loads = _swap_refine(costs, assignment, num_devices)

    identity = [i // samples_per_device for i in range(len(samples))]
    identity_loads = _loads_from(costs, identity, num_devices)
    if max(identity_loads) < max(loads):
        assignment, loads = _swap_refine(costs, identity, num_devices)
    return Assignment(
        device_of_sample=tuple(assignment),
        loads=tuple(loads),
        samples_per_device=samples_per_device,
    )


def identity_assignment(samples, num_devices: int, samples_per_device: int) -> Assignment:
    """Samples kept in natural order, chunked across devices."""
    if len(samples) != num_devices * samples_per_device:
        raise ShapeMismatch("sample count must equal devices * samples_per_device")
    costs = [sample_cost(s) for s in samples]
    devices = tuple(i // samples_per_device for i in range(len(samples)))
    return Assignment(
        device_of_sample=devices,
        loads=tuple(_loads_from(costs, devices, num_devices)),
        samples_per_device=samples_per_device,
    )


def imbalance(assignment: Assignment) -> float:
    """Peak device load over mean device load (>= 1)."""
    loads = assignment.loads
    mean = sum(loads) / len(loads)
    if mean == 0:
        return 1.0
    return max(loads) / mean
