"""Analytical per-layer FLOP, byte, and collective-time formulas.

Every formula here is pinned, with its assumptions, in FORMULAS.md at the
repository root. The estimates are pruning tools: they must rank
configurations correctly and bound memory honestly, not predict hardware
milliseconds.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ClusterTopology, LinkSpec, ModelConfig, TrainingJob
from .errors import IncompletePlan, InvalidStrategy
from .inflight import inflight_table

RECOMPUTE_MODES = ("none", "selective", "full")

COLLECTIVE_KINDS = ("all_reduce", "all_gather", "reduce_scatter", "all_to_all")


@dataclass(frozen=True)
class LayerCost:
    """Per-layer, per-device costs for one transformer/MoE layer.

    ``act_bytes_full`` is the boundary tensor kept when the whole layer is
    recomputed; when aggregating a span of layers under full recompute only
    one boundary tensor is stored per in-flight microbatch, so that figure
    is per span, not per layer.
    """

    fwd_flops: float
    bwd_flops: float
    param_bytes: float
    act_bytes_none: float
    act_bytes_selective: float
    act_bytes_full: float
    attn_core_flops: float  # portion re-run by selective recompute

    def act_bytes(self, mode: str) -> float:
        if mode == "none":
            return self.act_bytes_none
        if mode == "selective":
            return self.act_bytes_selective
        if mode == "full":
            return self.act_bytes_full
        raise ValueError(f"unknown recompute mode {mode!r}")


@dataclass(frozen=True)
class MemoryBreakdown:
    params: float
    gradients: float
    optimizer_states: float
    activations: float
    total: float

    @classmethod
    def build(cls, params, gradients, optimizer_states, activations):
        return cls(
            params=params,
            gradients=gradients,
            optimizer_states=optimizer_states,
            activations=activations,
            total=params + gradients + optimizer_states + activations,
        )


@dataclass(frozen=True)
class CostEstimate:
    compute_sec: float
    bubble_sec: float
    dp_comm_sec: float
    tp_comm_sec: float
    ep_comm_sec: float
    pp_comm_sec: float
    step_time_sec: float
    memory: MemoryBreakdown


def collective_time(kind: str, num_bytes: float, group_size: int, link: LinkSpec) -> float:
    """Latency/bandwidth time of one ring-style collective.

    ``num_bytes`` is the full payload: the tensor size for all_reduce, the
    gathered output for all_gather, the pre-reduction input for
    reduce_scatter, and one rank's whole exchange buffer for all_to_all.
    """
    if kind not in COLLECTIVE_KINDS:
        raise ValueError(f"unknown collective kind {kind!r}")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    if num_bytes < 0:
        raise ValueError("num_bytes must be >= 0")
    if group_size == 1:
        return 0.0
    g = group_size
    hops = g - 1
    wire = num_bytes * hops / (g * link.bandwidth_bytes_per_sec)
    if kind == "all_reduce":
        return link.latency_sec * 2 * hops + 2 * wire
    return link.latency_sec * hops + wire


def _check_strategy_divisibility(model: ModelConfig, strategy) -> None:
    if model.num_heads % strategy.tp != 0:
        raise InvalidStrategy(
            f"num_heads={model.num_heads} not divisible by tp={strategy.tp}"
        )
    if model.num_routed_experts % strategy.ep != 0:
        raise InvalidStrategy(
            f"num_routed_experts={model.num_routed_experts} not divisible by ep={strategy.ep}"
        )
    if model.num_layers < strategy.pp * strategy.vpp:
        raise InvalidStrategy(
            f"num_layers={model.num_layers} < pp*vpp={strategy.pp * strategy.vpp}"
        )


def layer_cost(model: ModelConfig, strategy, micro_batch_size: int) -> LayerCost:
    """Costs of one layer for one microbatch on one device.

    Routing is assumed perfectly balanced, so each device applies
    ``experts_per_token + num_shared_experts`` expert MLPs per local token.
    Router/gating FLOPs and bias terms are ignored (sub-0.1% of a layer).
    """
    _check_strategy_divisibility(model, strategy)
    tp = strategy.tp
    sp_div = tp if strategy.sp_enabled else 1
    tokens = micro_batch_size * model.seq_len
    h = model.hidden_size
    e_i = model.expert_intermediate_size
    applied = model.experts_per_token + model.num_shared_experts
    d = model.param_dtype_bytes

    attn_proj_flops = 8.0 * tokens * h * h / tp
    attn_core = 4.0 * tokens * model.seq_len * h / tp
    moe_flops = 6.0 * tokens * h * e_i * applied / tp
    fwd = attn_proj_flops + attn_core + moe_flops

    local_experts = model.num_routed_experts // strategy.ep + model.num_shared_experts
    param_bytes = (4.0 * h * h / tp + local_experts * 3.0 * h * e_i / tp) * d

    residual = tokens * h * d / sp_div
    qkv = 3.0 * tokens * h * d / tp
    scores = model.num_heads * tokens * model.seq_len * d / tp
    attn_out = tokens * h * d / tp
    expert_inputs = applied * tokens * h * d / tp
    expert_inner = 3.0 * applied * tokens * e_i * d / tp
    moe_out = tokens * h * d / sp_div
    norms = 2.0 * tokens * h * d / sp_div

    act_none = residual + qkv + scores + attn_out + expert_inputs + expert_inner + moe_out + norms
    act_selective = act_none - scores
    boundary = tokens * h * d / sp_div

    return LayerCost(
        fwd_flops=fwd,
        bwd_flops=2.0 * fwd,
        param_bytes=param_bytes,
        act_bytes_none=act_none,
        act_bytes_selective=act_selective,
        act_bytes_full=boundary,
        attn_core_flops=attn_core,
    )


def embedding_param_bytes(model: ModelConfig, strategy) -> float:
    """Vocab-parallel token embedding bytes on the first stage."""
    return model.vocab_size * model.hidden_size * model.param_dtype_bytes / strategy.tp


def head_param_bytes(model: ModelConfig, strategy) -> float:
    """Vocab-parallel LM head bytes on the last stage (untied)."""
    return model.vocab_size * model.hidden_size * model.param_dtype_bytes / strategy.tp


def head_fwd_flops(model: ModelConfig, strategy, micro_batch_size: int) -> float:
    tokens = micro_batch_size * model.seq_len
    return 2.0 * tokens * model.hidden_size * model.vocab_size / strategy.tp


def static_bytes(param_bytes: float, model: ModelConfig, op: int) -> float:
    """Params + same-dtype gradients + OP-sharded Adam-style states."""
    count = param_bytes / model.param_dtype_bytes
    optimizer = 3.0 * count * model.master_dtype_bytes / op
    return param_bytes * 2.0 + optimizer


def _plan_schedule_kind(strategy) -> str:
    return "interleaved_1f1b" if strategy.vpp > 1 else "one_f_one_b"


def _cell_act_bytes(cost: LayerCost, n: int, mode: str) -> float:
    # Full recompute keeps a single boundary tensor per in-flight microbatch
    # for the whole span; the other modes stash per-layer tensors.
    if mode == "full":
        return cost.act_bytes_full
    return n * cost.act_bytes(mode)


def device_memory_per_stage(model, strategy, plan, job: TrainingJob):
    """Memory breakdown for every pipeline stage under the given plan."""
    _check_strategy_divisibility(model, strategy)
    p, v = plan.pipeline_stages, plan.virtual_chunks
    if sum(sum(row) for row in plan.layer_counts) != model.num_layers:
        raise IncompletePlan(
            f"plan covers {sum(sum(r) for r in plan.layer_counts)} layers, "
            f"model has {model.num_layers}"
        )
    cost = layer_cost(model, strategy, strategy.micro_batch_size)
    table = inflight_table(p, v, strategy.num_micro_batches, _plan_schedule_kind(strategy))
    master_ratio = model.master_dtype_bytes / model.param_dtype_bytes
    out = []
    for s in range(p):
        params = sum(plan.layer_counts[s]) * cost.param_bytes
        if s == plan.embedding_stage:
            params += embedding_param_bytes(model, strategy)
        if s == plan.head_stage:
            params += head_param_bytes(model, strategy)
        gradients = params
        optimizer = 3.0 * params * master_ratio / strategy.op
        acts = 0.0
        for c in range(v):
            n = plan.layer_counts[s][c]
            mode = plan.recompute[s][c]
            acts += table[s][c] * _cell_act_bytes(cost, n, mode)
        out.append(MemoryBreakdown.build(params, gradients, optimizer, acts))
    return out


def device_memory(model, strategy, plan, job: TrainingJob) -> MemoryBreakdown:
    """Breakdown of the most loaded stage."""
    stages = device_memory_per_stage(model, strategy, plan, job)
    return max(stages, key=lambda b: b.total)


def layer_times(model, strategy, cluster: ClusterTopology, micro_batch_size: int):
    """(fwd, bwd, selective-recompute, full-recompute) seconds per layer."""
    cost = layer_cost(model, strategy, micro_batch_size)
    rate = cluster.device_flops_per_sec
    f = cost.fwd_flops / rate
    return f, cost.bwd_flops / rate, cost.attn_core_flops / rate, f


def _cell_times(model, strategy, plan, cluster):
    """Per-cell (fwd, bwd, recompute) seconds including embed/head extras."""
    p, v = plan.pipeline_stages, plan.virtual_chunks
    f1, b1, rsel, rfull = layer_times(model, strategy, cluster, strategy.micro_batch_size)
    head_f = head_fwd_flops(model, strategy, strategy.micro_batch_size) / cluster.device_flops_per_sec
    fwd = [[plan.layer_counts[s][c] * f1 for c in range(v)] for s in range(p)]
    bwd = [[plan.layer_counts[s][c] * b1 for c in range(v)] for s in range(p)]
    rc = [[0.0] * v for _ in range(p)]
    for s in range(p):
        for c in range(v):
            mode = plan.recompute[s][c]
            if mode == "selective":
                rc[s][c] = plan.layer_counts[s][c] * rsel
            elif mode == "full":
                rc[s][c] = plan.layer_counts[s][c] * rfull
    fwd[plan.head_stage][v - 1] += head_f
    bwd[plan.head_stage][v - 1] += 2.0 * head_f
    return fwd, bwd, rc


def plan_durations(model, strategy, plan, cluster: ClusterTopology):
    """(per-cell durations, boundary send seconds) for the simulator."""
    from .pipe_sim import Durations

    fwd, bwd, rc = _cell_times(model, strategy, plan, cluster)
    sp_div = strategy.tp if strategy.sp_enabled else 1
    boundary = strategy.micro_batch_size * model.seq_len * model.hidden_size
    boundary *= model.param_dtype_bytes / sp_div
    link = cluster.inter_node_link
    comm = link.latency_sec + boundary / link.bandwidth_bytes_per_sec if plan.pipeline_stages > 1 else 0.0
    return (
        Durations(
            tuple(tuple(row) for row in fwd),
            tuple(tuple(row) for row in bwd),
            tuple(tuple(row) for row in rc),
        ),
        comm,
    )


def step_time_estimate(model, strategy, plan, job: TrainingJob, cluster: ClusterTopology) -> CostEstimate:
    """Closed-form step time: compute + bubble + exposed communication."""
    _check_strategy_divisibility(model, strategy)
    p, v = plan.pipeline_stages, plan.virtual_chunks
    m = strategy.num_micro_batches
    fwd, bwd, rc = _cell_times(model, strategy, plan, cluster)

    stage_sec = [sum(fwd[s][c] + bwd[s][c] + rc[s][c] for c in range(v)) for s in range(p)]
    cell_sec = [fwd[s][c] + bwd[s][c] + rc[s][c] for s in range(p) for c in range(v)]
    compute = m * max(stage_sec)
    bubble = (p - 1) * max(cell_sec)

    tokens = strategy.micro_batch_size * model.seq_len
    d = model.param_dtype_bytes
    layers_bottleneck = max(sum(plan.layer_counts[s]) for s in range(p))
    act_tensor = tokens * model.hidden_size * d

    tp_comm = 0.0
    if strategy.tp > 1:
        # 2 collectives forward + 2 backward per layer; with sequence
        # parallelism the all-reduce splits into AG+RS of the same ring cost.
        per_layer = 4.0 * collective_time("all_reduce", act_tensor, strategy.tp, cluster.intra_node_link)
        tp_comm = m * layers_bottleneck * per_layer

    ep_comm = 0.0
    if strategy.ep > 1:
        dispatch_bytes = tokens * model.experts_per_token * model.hidden_size * d / strategy.tp
        ep_link = (
            cluster.intra_node_link
            if strategy.tp * strategy.ep <= cluster.devices_per_node
            else cluster.inter_node_link
        )
        per_layer = 4.0 * collective_time("all_to_all", dispatch_bytes, strategy.ep, ep_link)
        ep_comm = m * layers_bottleneck * per_layer

    dp_comm = 0.0
    if strategy.dp > 1:
        grad_bytes = layers_bottleneck * layer_cost(model, strategy, strategy.micro_batch_size).param_bytes
        dp_comm = collective_time("all_reduce", grad_bytes, strategy.dp, cluster.inter_node_link)

    pp_comm = 0.0
    if p > 1:
        sp_div = strategy.tp if strategy.sp_enabled else 1
        boundary = act_tensor / sp_div
        link = cluster.inter_node_link
        pp_comm = 2.0 * (p - 1) * v * (link.latency_sec + boundary / link.bandwidth_bytes_per_sec)

    memory = device_memory(model, strategy, plan, job)
    step = compute + bubble + tp_comm + ep_comm + dp_comm + pp_comm
    return CostEstimate(
        compute_sec=compute,
        bubble_sec=bubble,
        dp_comm_sec=dp_comm,
        tp_comm_sec=tp_comm,
        ep_comm_sec=ep_comm,
        pp_comm_sec=pp_comm,
        step_time_sec=step,
        memory=memory,
    )
