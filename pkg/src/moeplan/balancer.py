"""Exact pipeline load balancing under a per-device memory cap.

For a fixed strategy this picks per-(stage, chunk) layer counts and
recomputation modes minimizing the surrogate step time

    m * T1 + (p - 1) * T2,   T1 >= per-microbatch stage time,
                             T2 >= any single (stage, chunk) cell time,

subject to per-stage memory <= cap. Layers map to cells chunk-major
(chunk 0 stages 0..p-1, then chunk 1, ...), so each cell is a contiguous
layer span. The search is depth-first over span lengths with lower-bound
pruning; recomputation modes are optimized exactly per leaf. The
``proven_optimal`` flag is set only when the search ran to completion.

Ties are broken by the lexicographically smallest (layer_counts,
recompute) pair, each flattened stage-major with modes ordered
none < selective < full.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

from . import cost_model
from .config import ClusterTopology, ModelConfig, TrainingJob
from .errors import Infeasible, InvalidStrategy
from .inflight import inflight_table

MODE_ORDER = ("none", "selective", "full")


@dataclass(frozen=True)
class PipelinePlan:
    """Per-(stage, chunk) layer counts and recompute modes."""

    layer_counts: tuple[tuple[int, ...], ...]
    recompute: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        p = len(self.layer_counts)
        if p == 0 or len(self.layer_counts[0]) == 0:
            raise InvalidStrategy("plan needs at least one stage and one chunk")
        v = len(self.layer_counts[0])
        if len(self.recompute) != p or any(
            len(row) != v for row in self.layer_counts
        ) or any(len(row) != v for row in self.recompute):
            raise InvalidStrategy("layer_counts and recompute must share one p x v shape")
        for row in self.layer_counts:
            if any(n < 1 for n in row):
                raise InvalidStrategy("every (stage, chunk) cell needs >= 1 layer")
        for row in self.recompute:
            for mode in row:
                if mode not in MODE_ORDER:
                    raise InvalidStrategy(f"unknown recompute mode {mode!r}")

    @property
    def pipeline_stages(self) -> int:
        return len(self.layer_counts)

    @property
    def virtual_chunks(self) -> int:
        return len(self.layer_counts[0])

    @property
    def num_layers(self) -> int:
        return sum(sum(row) for row in self.layer_counts)

    @property
    def embedding_stage(self) -> int:
        return 0

    @property
    def head_stage(self) -> int:
        return self.pipeline_stages - 1

    def layer_spans(self) -> dict[tuple[int, int], tuple[int, int]]:
        """(stage, chunk) -> contiguous [start, end) layer span."""
        p, v = self.pipeline_stages, self.virtual_chunks
        spans = {}
        offset = 0
        for c in range(v):
            for s in range(p):
                n = self.layer_counts[s][c]
                spans[(s, c)] = (offset, offset + n)
                offset += n
        return spans

    @classmethod
    def even(cls, num_layers: int, p: int, v: int, mode: str = "none") -> "PipelinePlan":
        """Near-even split; the remainder goes to the first cells chunk-major."""
        cells = p * v
        if num_layers < cells:
            raise InvalidStrategy(f"num_layers={num_layers} < p*v={cells}")
        base, rem = divmod(num_layers, cells)
        counts = [[0] * v for _ in range(p)]
        for q in range(cells):
            s, c = q % p, q // p
            counts[s][c] = base + (1 if q < rem else 0)
        return cls(
            tuple(tuple(row) for row in counts),
            tuple(tuple(mode for _ in range(v)) for _ in range(p)),
        )


@dataclass(frozen=True)
class BalanceInstance:
    """A balancing problem over explicit per-layer costs.

    ``static_bytes`` covers params+grads+optimizer per layer; activation
    bytes are weighted by the in-flight table. ``cell_extra_sec`` carries
    fixed embedding/head compute pinned to specific cells, and
    ``stage_extra_bytes`` their static memory.
    """

    p: int
    v: int
    m: int
    fwd_sec: tuple[float, ...]
    bwd_sec: tuple[float, ...]
    rc_selective_sec: tuple[float, ...]
    act_none_bytes: tuple[float, ...]
    act_selective_bytes: tuple[float, ...]
    boundary_bytes: float
    static_bytes: tuple[float, ...]
    inflight: tuple[tuple[int, ...], ...]
    mem_cap_bytes: float
    stage_extra_bytes: tuple[float, ...]
    cell_extra_sec: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        L = len(self.fwd_sec)
        for name in ("bwd_sec", "rc_selective_sec", "act_none_bytes",
                     "act_selective_bytes", "static_bytes"):
            if len(getattr(self, name)) != L:
                raise InvalidStrategy(f"{name} must have one entry per layer")
        for name in ("fwd_sec", "bwd_sec", "rc_selective_sec", "static_bytes"):
            if any(x < 0 for x in getattr(self, name)):
                raise InvalidStrategy(f"{name} entries must be >= 0")
        # Memory pruning relies on full recompute being the cheapest mode.
        for a_sel, a_none in zip(self.act_selective_bytes, self.act_none_bytes):
            if not 0 <= a_sel <= a_none:
                raise InvalidStrategy("need 0 <= act_selective <= act_none per layer")
        if self.act_selective_bytes and not (
            0 <= self.boundary_bytes <= min(self.act_selective_bytes)
        ):
            raise InvalidStrategy("need boundary_bytes <= every act_selective entry")

    @property
    def num_layers(self) -> int:
        return len(self.fwd_sec)


@dataclass(frozen=True)
class BalanceResult:
    plan: PipelinePlan
    objective_sec: float
    per_stage_memory: list
    proven_optimal: bool


class _Prefix:
    """Prefix sums for O(1) span costs, plus tail bounds for pruning."""

    def __init__(self, inst: BalanceInstance):
        def prefix(xs):
            out = [0.0]
            for x in xs:
                out.append(out[-1] + x)
            return out

        fb = [f + b for f, b in zip(inst.fwd_sec, inst.bwd_sec)]
        self.fb = prefix(fb)
        self.f = prefix(inst.fwd_sec)
        self.rsel = prefix(inst.rc_selective_sec)
        self.an = prefix(inst.act_none_bytes)
        self.asel = prefix(inst.act_selective_bytes)
        self.static = prefix(inst.static_bytes)
        n = len(fb)
        self.min_tail = [math.inf] * (n + 1)
        for i in reversed(range(n)):
            self.min_tail[i] = min(self.min_tail[i + 1], fb[i])
        self.work_tail = [0.0] * (n + 1)
        for i in reversed(range(n)):
            self.work_tail[i] = self.work_tail[i + 1] + fb[i]

    @staticmethod
    def span(table, i, j):
        return table[j] - table[i]


def _cell_time(prefix, inst, s, c, i, j, mode_rank):
    t = prefix.span(prefix.fb, i, j) + inst.cell_extra_sec[s][c]
    if mode_rank == 1:
        t += prefix.span(prefix.rsel, i, j)
    elif mode_rank == 2:
        t += prefix.span(prefix.f, i, j)
    return t


def _cell_act(prefix, inst, i, j, mode_rank):
    if mode_rank == 0:
        return prefix.span(prefix.an, i, j)
    if mode_rank == 1:
        return prefix.span(prefix.asel, i, j)
    return inst.boundary_bytes


class _StageTable:
    """All memory-feasible mode combos of one completed stage row."""

    __slots__ = ("options", "maxcells", "min_t_at", "min_t", "min_maxcell")

    def __init__(self, prefix, inst, s, spans):
        per_cell = []
        static = inst.stage_extra_bytes[s]
        for c, (i, j) in enumerate(spans):
            static += prefix.span(prefix.static, i, j)
            cell = []
            for rank in range(3):
                cell.append(
                    (
                        rank,
                        _cell_time(prefix, inst, s, c, i, j, rank),
                        inst.inflight[s][c] * _cell_act(prefix, inst, i, j, rank),
                    )
                )
            per_cell.append(cell)
        options = []
        for combo in product(*per_cell):
            mem = static + sum(x[2] for x in combo)
            if mem > inst.mem_cap_bytes:
                continue
            t = sum(x[1] for x in combo)
            maxcell = max(x[1] for x in combo)
            options.append((maxcell, t, tuple(x[0] for x in combo)))
        options.sort()
        self.options = options
        if not options:
            self.maxcells = []
            self.min_t_at = []
            self.min_t = math.inf
            self.min_maxcell = math.inf
            return
        self.maxcells = [o[0] for o in options]
        best = math.inf
        mins = []
        for o in options:
            best = min(best, o[1])
            mins.append(best)
        self.min_t_at = mins
        self.min_t = best
        self.min_maxcell = options[0][0]


def _combine(tables, m, bubble_coeff, t1_floor=0.0, t2_floor=0.0):
    """Exact min of m*T1 + bubble_coeff*T2 over one option per stage.

    Scans candidate T2 ceilings ascending; for each ceiling, T1 is the max
    of per-stage minimum times among options whose largest cell fits.
    """
    if any(not t.options for t in tables):
        return math.inf
    candidates = [t2_floor] + sorted(
        {mc for t in tables for mc in t.maxcells if mc > t2_floor}
    )
    t1_global = max(max(t.min_t for t in tables), t1_floor)
    ptrs = [0] * len(tables)
    cur = [math.inf] * len(tables)
    best = math.inf
    for tau in candidates:
        for idx, table in enumerate(tables):
            ptr = ptrs[idx]
            while ptr < len(table.maxcells) and table.maxcells[ptr] <= tau:
                ptr += 1
            ptrs[idx] = ptr
            if ptr > 0:
                cur[idx] = table.min_t_at[ptr - 1]
        if math.inf in cur:
            continue
        t1 = max(max(cur), t1_floor)
        obj = m * t1 + bubble_coeff * max(tau, t2_floor)
        if obj < best:
            best = obj
        if bubble_coeff > 0 and m * t1_global + bubble_coeff * tau >= best:
            break
    return best


def _lex_min_modes(tables, m, bubble_coeff, objective):
    """Smallest stage-major mode assignment achieving the given objective."""
    p = len(tables)
    chosen = []
    t1_cur, t2_cur = 0.0, 0.0
    for s in range(p):
        by_rank = sorted(tables[s].options, key=lambda o: o[2])
        picked = None
        for maxcell, t, ranks in by_rank:
            n_t1 = max(t1_cur, t)
            n_t2 = max(t2_cur, maxcell)
            rest = tables[s + 1 :]
            if rest:
                completion = _combine(rest, m, bubble_coeff, n_t1, n_t2)
            else:
                completion = m * n_t1 + bubble_coeff * n_t2
            if completion <= objective:
                picked = ranks
                t1_cur, t2_cur = n_t1, n_t2
                break
        if picked is None:
            raise AssertionError("mode reconstruction failed; solver bug")
        chosen.append(picked)
    return tuple(chosen)


def _spans_from_blocks(blocks, p, v):
    """Chunk-major block lengths -> per-stage span tuples."""
    offsets = [0]
    for n in blocks:
        offsets.append(offsets[-1] + n)
    spans = [[None] * v for _ in range(p)]
    for q, n in enumerate(blocks):
        s, c = q % p, q // p
        spans[s][c] = (offsets[q], offsets[q] + n)
    return [tuple(row) for row in spans]


def _plan_from_blocks(blocks, modes, p, v):
    counts = [[0] * v for _ in range(p)]
    rec = [["none"] * v for _ in range(p)]
    for q, n in enumerate(blocks):
        s, c = q % p, q // p
        counts[s][c] = n
        rec[s][c] = MODE_ORDER[modes[s][c]]
    return PipelinePlan(
        tuple(tuple(row) for row in counts),
        tuple(tuple(row) for row in rec),
    )


def _instance_stage_memory(prefix, inst, plan):
    """Per-stage totals; params/grads/optimizer are folded into `params`."""
    out = []
    spans = plan.layer_spans()
    for s in range(inst.p):
        static = inst.stage_extra_bytes[s]
        acts = 0.0
        for c in range(inst.v):
            i, j = spans[(s, c)]
            static += prefix.span(prefix.static, i, j)
            acts += inst.inflight[s][c] * _cell_act(
                prefix, inst, i, j, MODE_ORDER.index(plan.recompute[s][c])
            )
        out.append(cost_model.MemoryBreakdown.build(static, 0.0, 0.0, acts))
    return out


def _min_peak_memory(prefix, inst):
    """Smallest achievable max-stage memory (full recompute everywhere)."""
    p, v = inst.p, inst.v
    L = inst.num_layers
    cells = p * v
    act_const = [
        inst.stage_extra_bytes[s]
        + sum(inst.inflight[s][c] for c in range(v)) * inst.boundary_bytes
        for s in range(p)
    ]
    best = [math.inf]
    stage_static = [0.0] * p

    def rec(q, offset, cur_max):
        if cur_max >= best[0]:
            return
        if q == cells:
            best[0] = cur_max
            return
        s = q % p
        rem_blocks = cells - q
        max_n = L - offset - (rem_blocks - 1)
        min_n = max_n if rem_blocks == 1 else 1  # last block takes the rest
        for n in range(min_n, max_n + 1):
            add = prefix.span(prefix.static, offset, offset + n)
            if stage_static[s] + add + act_const[s] >= best[0]:
                break  # static grows with n
            stage_static[s] += add
            rec(q + 1, offset + n, max(cur_max, stage_static[s] + act_const[s]))
            stage_static[s] -= add

    rec(0, 0, 0.0)
    return best[0]


def _is_uniform(inst: BalanceInstance) -> bool:
    def const(xs):
        return all(x == xs[0] for x in xs)

    return all(
        const(getattr(inst, name))
        for name in (
            "fwd_sec",
            "bwd_sec",
            "rc_selective_sec",
            "act_none_bytes",
            "act_selective_bytes",
            "static_bytes",
        )
    )


def solve_instance(inst: BalanceInstance, node_budget: int = 5_000_000) -> BalanceResult:
    """Exact branch-and-bound over spans, exact mode choice per leaf."""
    p, v, m = inst.p, inst.v, inst.m
    L = inst.num_layers
    cells = p * v
    if L < cells:
        raise InvalidStrategy(f"num_layers={L} < p*v={cells}")
    prefix = _Prefix(inst)
    bubble = float(p - 1)
    uniform = _is_uniform(inst)
    table_cache: dict[tuple, _StageTable] = {}

    def stage_table(s, spans):
        # With identical layers only span lengths matter, which makes the
        # cache hit for every arrangement of the same row counts.
        key = (s, tuple(j - i for i, j in spans)) if uniform else (s, spans)
        got = table_cache.get(key)
        if got is None:
            got = _StageTable(prefix, inst, s, spans)
            table_cache[key] = got
        return got

    def counts_key(blocks):
        counts = [[0] * v for _ in range(p)]
        for q, n in enumerate(blocks):
            counts[q % p][q // p] = n
        return tuple(tuple(row) for row in counts)

    best = {"obj": math.inf, "key": None, "blocks": None, "modes": None}
    state = {"nodes": 0, "complete": True}

    def consider_leaf(blocks):
        spans = _spans_from_blocks(blocks, p, v)
        tables = [stage_table(s, spans[s]) for s in range(p)]
        if any(not t.options for t in tables):
            return
        obj = _combine(tables, m, bubble)
        if math.isinf(obj) or obj > best["obj"]:
            return
        ckey = counts_key(blocks)
        if obj == best["obj"] and best["key"] is not None and ckey > best["key"][0]:
            return
        modes = _lex_min_modes(tables, m, bubble, obj)
        key = (ckey, modes)
        if obj < best["obj"] or best["key"] is None or key < best["key"]:
            best["obj"] = obj
            best["key"] = key
            best["blocks"] = tuple(blocks)
            best["modes"] = modes

    blocks = [0] * cells
    stage_time = [0.0] * p  # none-mode time of assigned cells (incl. extras)
    stage_extra_rem = [sum(inst.cell_extra_sec[s]) for s in range(p)]
    stage_static = list(inst.stage_extra_bytes)
    stage_cells_left = [v] * p
    completed_min_t = [None] * p
    completed_min_maxcell = [0.0] * p
    boundary_lb = [
        sum(inst.inflight[s][c] for c in range(v)) * inst.boundary_bytes for s in range(p)
    ]
    running = {"maxcell": 0.0}

    def bound(offset, q):
        rem = L - offset
        rem_blocks = cells - q
        min_layer = prefix.min_tail[offset] if rem else 0.0
        t1 = 0.0
        for s in range(p):
            if completed_min_t[s] is not None:
                t = completed_min_t[s]
            else:
                t = stage_time[s] + stage_cells_left[s] * min_layer + stage_extra_rem[s]
            if t > t1:
                t1 = t
        avg = (
            sum(stage_time) + prefix.work_tail[offset] + sum(stage_extra_rem)
        ) / p
        t1 = max(t1, avg)
        t2 = max(running["maxcell"], max(completed_min_maxcell))
        if rem_blocks:
            t2 = max(t2, math.ceil(rem / rem_blocks) * min_layer)
        return m * t1 + bubble * t2

    def stage_spans(s):
        spans = []
        offset = 0
        for q in range(cells):
            if q % p == s:
                spans.append((offset, offset + blocks[q]))
            offset += blocks[q]
        return tuple(spans)

    def rec(q, offset):
        state["nodes"] += 1
        if state["nodes"] > node_budget:
            state["complete"] = False
            return
        if q == cells:
            consider_leaf(blocks)
            return
        s, c = q % p, q // p
        rem_blocks = cells - q
        max_n = L - offset - (rem_blocks - 1)
        min_n = max_n if rem_blocks == 1 else 1  # last block takes the rest
        extra = inst.cell_extra_sec[s][c]
        for n in range(min_n, max_n + 1):
            if not state["complete"]:
                return
            i, j = offset, offset + n
            static_add = prefix.span(prefix.static, i, j)
            if stage_static[s] + static_add + boundary_lb[s] > inst.mem_cap_bytes:
                break  # static grows with n
            cell_t = prefix.span(prefix.fb, i, j) + extra
            blocks[q] = n
            stage_time[s] += cell_t
            stage_extra_rem[s] -= extra
            stage_static[s] += static_add
            stage_cells_left[s] -= 1
            prev_maxcell = running["maxcell"]
            running["maxcell"] = max(prev_maxcell, cell_t)
            prev_min_t = completed_min_t[s]
            prev_min_mc = completed_min_maxcell[s]
            feasible = True
            if c == v - 1:
                table = stage_table(s, stage_spans(s))
                if table.options:
                    completed_min_t[s] = table.min_t
                    completed_min_maxcell[s] = table.min_maxcell
                else:
                    feasible = False
            if feasible and bound(offset + n, q + 1) <= best["obj"]:
                rec(q + 1, offset + n)
            blocks[q] = 0
            stage_time[s] -= cell_t
            stage_extra_rem[s] += extra
            stage_static[s] -= static_add
            stage_cells_left[s] += 1
            running["maxcell"] = prev_maxcell
            completed_min_t[s] = prev_min_t
            completed_min_maxcell[s] = prev_min_mc

    # Seed the incumbent with the even split so pruning bites immediately.
    even_blocks = [0] * cells
    base, rem = divmod(L, cells)
    for q in range(cells):
        even_blocks[q] = base + (1 if q < rem else 0)
    consider_leaf(even_blocks)

    rec(0, 0)

    if best["blocks"] is None:
        min_mem = _min_peak_memory(prefix, inst)
        if min_mem > inst.mem_cap_bytes:
            raise Infeasible(
                f"no plan fits the {inst.mem_cap_bytes:.6g}-byte cap; minimal "
                f"achievable peak memory is {min_mem:.6g} bytes",
                min_memory_bytes=min_mem,
            )
        raise Infeasible(
            "search budget exhausted before any feasible plan was found",
            min_memory_bytes=min_mem,
        )

    modes_matrix = [[best["modes"][s][c] for c in range(v)] for s in range(p)]
    plan = _plan_from_blocks(best["blocks"], modes_matrix, p, v)
    per_stage = _instance_stage_memory(prefix, inst, plan)
    return BalanceResult(
        plan=plan,
        objective_sec=best["obj"],
        per_stage_memory=per_stage,
        proven_optimal=state["complete"],
    )


def build_instance(
    strategy, model: ModelConfig, cluster: ClusterTopology, job: TrainingJob
) -> BalanceInstance:
    """Assemble the balancing problem for a model-backed strategy."""
    p, v, m = strategy.pp, strategy.vpp, strategy.num_micro_batches
    L = model.num_layers
    cost = cost_model.layer_cost(model, strategy, strategy.micro_batch_size)
    f1, b1, rsel, _ = cost_model.layer_times(
        model, strategy, cluster, strategy.micro_batch_size
    )
    kind = "interleaved_1f1b" if v > 1 else "one_f_one_b"
    table = inflight_table(p, v, m, kind)
    layer_static = cost_model.static_bytes(cost.param_bytes, model, strategy.op)
    embed_static = cost_model.static_bytes(
        cost_model.embedding_param_bytes(model, strategy), model, strategy.op
    )
    head_static = cost_model.static_bytes(
        cost_model.head_param_bytes(model, strategy), model, strategy.op
    )
    head_f = (
        cost_model.head_fwd_flops(model, strategy, strategy.micro_batch_size)
        / cluster.device_flops_per_sec
    )
    stage_extra = [0.0] * p
    stage_extra[0] += embed_static
    stage_extra[p - 1] += head_static
    cell_extra = [[0.0] * v for _ in range(p)]
    cell_extra[p - 1][v - 1] += 3.0 * head_f  # forward + 2x backward
    return BalanceInstance(
        p=p,
        v=v,
        m=m,
        fwd_sec=(f1,) * L,
        bwd_sec=(b1,) * L,
        rc_selective_sec=(rsel,) * L,
        act_none_bytes=(cost.act_bytes_none,) * L,
        act_selective_bytes=(cost.act_bytes_selective,) * L,
        boundary_bytes=cost.act_bytes_full,
        static_bytes=(layer_static,) * L,
        inflight=tuple(tuple(row) for row in table),
        mem_cap_bytes=float(job.max_device_memory_bytes),
        stage_extra_bytes=tuple(stage_extra),
        cell_extra_sec=tuple(tuple(row) for row in cell_extra),
    )


def balance(
    strategy,
    model: ModelConfig,
    cluster: ClusterTopology,
    job: TrainingJob,
    node_budget: int = 5_000_000,
) -> BalanceResult:
    """Balance one strategy; memory is re-derived from the cost model."""
    inst = build_instance(strategy, model, cluster, job)
    result = solve_instance(inst, node_budget=node_budget)
    per_stage = cost_model.device_memory_per_stage(model, strategy, result.plan, job)
    return BalanceResult(
        plan=result.plan,
        objective_sec=result.objective_sec,
        per_stage_memory=per_stage,
        proven_optimal=result.proven_optimal,
    )
