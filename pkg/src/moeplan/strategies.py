"""Enumeration, filtering, and analytical ranking of ND parallel strategies."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import cost_model
from .balancer import PipelinePlan
from .config import ClusterTopology, ModelConfig, TrainingJob
from .errors import EmptySearchSpace, InvalidStrategy


@dataclass(frozen=True)
class ParallelStrategy:
    """One point in the (DP, TP, PP, VPP, EP, OP, micro-batch) space."""

    dp: int
    tp: int
    pp: int
    vpp: int
    ep: int
    op: int
    micro_batch_size: int
    num_micro_batches: int
    sp_enabled: bool = False

    def sort_key(self):
        return (
            self.dp,
            self.tp,
            self.pp,
            self.vpp,
            self.ep,
            self.op,
            self.micro_batch_size,
        )

    def label(self) -> str:
        sp = "+sp" if self.sp_enabled else ""
        return (
            f"dp{self.dp} tp{self.tp}{sp} pp{self.pp} vpp{self.vpp} "
            f"ep{self.ep} op{self.op} mb{self.micro_batch_size}x{self.num_micro_batches}"
        )


@dataclass(frozen=True)
class SearchLimits:
    """Bounds on each searched dimension; None falls back to a default."""

    max_tp: int | None = None  # default: devices per node
    max_pp: int | None = None  # default: min(world, num_layers)
    max_vpp: int = 4
    max_ep: int | None = None  # default: world size
    max_micro_batch_size: int = 8
    op_values: tuple[int, ...] | None = None  # default: {1, dp}
    sequence_parallel: bool = True


@dataclass(frozen=True)
class RankedCandidate:
    strategy: ParallelStrategy
    estimate: cost_model.CostEstimate
    feasible: bool
    rank: int
    recompute_mode: str


def validate_strategy(
    strategy: ParallelStrategy,
    model: ModelConfig,
    cluster: ClusterTopology,
    job: TrainingJob,
) -> None:
    """Divisibility and shape checks; raises InvalidStrategy on violation."""
    s = strategy
    for name in ("dp", "tp", "pp", "vpp", "ep", "op", "micro_batch_size", "num_micro_batches"):
        if getattr(s, name) < 1:
            raise InvalidStrategy(f"{name} must be >= 1")
    if s.dp * s.tp * s.pp != cluster.world_size:
        raise InvalidStrategy(
            f"dp*tp*pp = {s.dp * s.tp * s.pp} != world_size = {cluster.world_size}"
        )
    if s.dp % s.ep != 0:
        raise InvalidStrategy(f"ep={s.ep} must divide dp={s.dp}")
    if s.dp % s.op != 0:
        raise InvalidStrategy(f"op={s.op} must divide dp={s.dp}")
    if s.dp * s.micro_batch_size * s.num_micro_batches != job.global_batch:
        raise InvalidStrategy(
            "dp*micro_batch_size*num_micro_batches = "
            f"{s.dp * s.micro_batch_size * s.num_micro_batches} != "
            f"global_batch = {job.global_batch}"
        )
    if model.num_layers < s.pp * s.vpp:
        raise InvalidStrategy(f"num_layers={model.num_layers} < pp*vpp={s.pp * s.vpp}")
    if s.vpp > 1 and s.num_micro_batches % s.pp != 0:
        raise InvalidStrategy(
            "interleaving needs num_micro_batches divisible by pp "
            f"(m={s.num_micro_batches}, pp={s.pp})"
        )
    if model.num_heads % s.tp != 0:
        raise InvalidStrategy(f"num_heads={model.num_heads} not divisible by tp={s.tp}")
    if model.num_routed_experts % s.ep != 0:
        raise InvalidStrategy(
            f"num_routed_experts={model.num_routed_experts} not divisible by ep={s.ep}"
        )
    if s.sp_enabled and s.tp == 1:
        raise InvalidStrategy("sequence parallelism requires tp > 1")


def _divisors(n: int) -> list[int]:
    out = [d for d in range(1, n + 1) if n % d == 0]
    return out


def enumerate_strategies(
    model: ModelConfig,
    cluster: ClusterTopology,
    job: TrainingJob,
    limits: SearchLimits = SearchLimits(),
) -> list[ParallelStrategy]:
    """Every strategy tuple satisfying the invariants, in sorted order.

    TP stays within one node; EP nests inside DP; OP defaults to the two
    interesting degrees {1, dp}. Interleaving (vpp > 1) is offered only
    where the interleaved schedule exists (pp > 1, m % pp == 0).
    """
    world = cluster.world_size
    max_tp = limits.max_tp if limits.max_tp is not None else cluster.devices_per_node
    max_tp = min(max_tp, cluster.devices_per_node)
    max_pp = limits.max_pp if limits.max_pp is not None else min(world, model.num_layers)
    max_ep = limits.max_ep if limits.max_ep is not None else world

    found = []
    for tp in _divisors(world):
        if tp > max_tp or model.num_heads % tp != 0:
            continue
        for pp in _divisors(world // tp):
            if pp > max_pp or pp > model.num_layers:
                continue
            dp = world // (tp * pp)
            if job.global_batch % dp != 0:
                continue
            local_batch = job.global_batch // dp
            op_values = limits.op_values if limits.op_values is not None else (1, dp)
            ops = sorted({o for o in op_values if o >= 1 and dp % o == 0})
            eps = [
                e
                for e in _divisors(dp)
                if e <= max_ep and model.num_routed_experts % e == 0
            ]
            for mb in _divisors(local_batch):
                if mb > limits.max_micro_batch_size:
                    continue
                m = local_batch // mb
                max_v = min(limits.max_vpp, model.num_layers // pp)
                vs = [1]
                if pp > 1 and m % pp == 0:
                    vs += [v for v in range(2, max_v + 1)]
                for v in vs:
                    for ep in eps:
                        for op in ops:
                            found.append(
                                ParallelStrategy(
                                    dp=dp,
                                    tp=tp,
                                    pp=pp,
                                    vpp=v,
                                    ep=ep,
                                    op=op,
                                    micro_batch_size=mb,
                                    num_micro_batches=m,
                                    sp_enabled=limits.sequence_parallel and tp > 1,
                                )
                            )
    if not found:
        raise EmptySearchSpace(
            "no strategy satisfies the constraints; widen the limits or "
            "check world size vs global batch"
        )
    found.sort(key=ParallelStrategy.sort_key)
    return found


def evaluate_candidate(
    strategy: ParallelStrategy,
    model: ModelConfig,
    cluster: ClusterTopology,
    job: TrainingJob,
):
    """Estimate one strategy on the even plan.

    Tries recompute modes cheapest-compute first and keeps the first that
    fits memory; returns (estimate, mode) or (None, None) when even full
    recompute overflows the cap.
    """
    plan_mode = None
    estimate = None
    for mode in ("none", "selective", "full"):
        plan = PipelinePlan.even(model.num_layers, strategy.pp, strategy.vpp, mode)
        mem = cost_model.device_memory(model, strategy, plan, job)
        if mem.total <= job.max_device_memory_bytes:
            plan_mode = mode
            estimate = cost_model.step_time_estimate(model, strategy, plan, job, cluster)
            break
    return estimate, plan_mode


def rank(
    candidates: list[ParallelStrategy],
    model: ModelConfig,
    cluster: ClusterTopology,
    job: TrainingJob,
    top_k: int = 5,
) -> list[RankedCandidate]:
    """Rank candidates by estimated step time; drop memory-infeasible ones."""
    if not candidates:
        raise InvalidStrategy("rank() needs a non-empty candidate list")
    scored = []
    for strategy in candidates:
        validate_strategy(strategy, model, cluster, job)
        estimate, mode = evaluate_candidate(strategy, model, cluster, job)
        if estimate is None:
            continue
        scored.append((estimate.step_time_sec, strategy, estimate, mode))
    scored.sort(
        key=lambda x: (x[0], x[1].pp, x[1].tp, x[1].ep, x[1].dp, x[1].sort_key())
    )
    out = []
    for i, (_, strategy, estimate, mode) in enumerate(scored[:top_k], start=1):
        out.append(
            RankedCandidate(
                strategy=strategy,
                estimate=estimate,
                feasible=True,
                rank=i,
                recompute_mode=mode,
            )
        )
    return out
