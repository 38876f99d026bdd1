"""Planner and simulator for multi-dimensional MoE training parallelization."""

__version__ = "0.1.0"

from .config import (  # noqa: F401
    ClusterTopology,
    LinkSpec,
    ModelConfig,
    TrainingJob,
    load_cluster,
    load_model_config,
    preset,
    preset_names,
)
from .cost_model import (  # noqa: F401
    CostEstimate,
    LayerCost,
    MemoryBreakdown,
    collective_time,
    device_memory,
    device_memory_per_stage,
    layer_cost,
    step_time_estimate,
)
from .strategies import (  # noqa: F401
    ParallelStrategy,
    RankedCandidate,
    SearchLimits,
    enumerate_strategies,
    rank,
    validate_strategy,
)
from .balancer import (  # noqa: F401
    BalanceInstance,
    BalanceResult,
    PipelinePlan,
    balance,
    solve_instance,
)
from .inflight import inflight_table  # noqa: F401
from .pipe_sim import (  # noqa: F401
    Durations,
    ScheduleTrace,
    TaskEvent,
    compare_overlap,
    measure_inflight,
    simulate,
)
from .ep_comm import (  # noqa: F401
    EpLayout,
    EpTraffic,
    OverlapConfig,
    RoutingTable,
    compare_modes,
    ep_time,
    route_tokens,
    traffic,
)
from .attn_balance import (  # noqa: F401
    Assignment,
    SampleSpec,
    balance_samples,
    imbalance,
    sample_cost,
)
from .report import canonical_json, emit_report, inputs_digest, render_gantt  # noqa: F401
