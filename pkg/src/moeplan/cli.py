"""Command-line entry point.

Subcommands: plan, balance, simulate, ep-comm, pack, presets. Every run
with identical flags and inputs produces byte-identical outputs; exit
codes are 0 (success), 1 (infeasible / no solution), 2 (invalid input).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__, balancer, config, cost_model, ep_comm, pipe_sim, report, strategies
from . import attn_balance
from .errors import (
    EmptySearchSpace,
    Infeasible,
    InvalidParams,
    InvalidStrategy,
    ParseError,
    PlannerError,
    ShapeMismatch,
    UnknownPreset,
    UnsupportedSchedule,
    ValidationError,
)

log = logging.getLogger("moeplan")

_INVALID_INPUT = (
    ParseError,
    ValidationError,
    UnknownPreset,
    InvalidStrategy,
    InvalidParams,
    ShapeMismatch,
    UnsupportedSchedule,
)
_NO_SOLUTION = (Infeasible, EmptySearchSpace)


def _read(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _emit(path, text):
    if path:
        _write(path, text)
    else:
        sys.stdout.write(text)


def _load_model(args):
    if args.preset:
        model = config.preset(args.preset)
    else:
        model = config.load_model_config(_read(args.model))
    if getattr(args, "seq_len", None):
        model = config.with_seq_len(model, args.seq_len)
    return model


def _load_cluster(args):
    return config.load_cluster(_read(args.cluster))


def _make_job(args, model, cluster):
    mem = (
        config.parse_byte_size(args.mem_limit)
        if args.mem_limit
        else cluster.device_memory_bytes
    )
    return config.TrainingJob(
        global_batch=args.global_batch,
        seq_len=model.seq_len,
        max_device_memory_bytes=mem,
    )


def _add_model_cluster_flags(sub, need_batch=True):
    group = sub.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", help="model config document")
    group.add_argument("--preset", choices=config.preset_names(), help="built-in model")
    sub.add_argument("--cluster", required=True, help="cluster config document")
    sub.add_argument("--seq-len", type=int, help="override training sequence length")
    sub.add_argument("--mem-limit", help="per-device memory cap, e.g. 45GiB")
    if need_batch:
        sub.add_argument("--global-batch", type=int, required=True)


def _schedule_for(strategy):
    return "interleaved_1f1b_overlap" if strategy.vpp > 1 else "one_f_one_b"


def _sim_spec_dict(strategy, plan, durations, comm_sec, schedule):
    return {
        "pipeline_stages": plan.pipeline_stages,
        "virtual_chunks": plan.virtual_chunks,
        "micro_batches": strategy.num_micro_batches,
        "layer_counts": [list(r) for r in plan.layer_counts],
        "recompute": [list(r) for r in plan.recompute],
        "fwd_sec": [list(r) for r in durations.fwd_sec],
        "bwd_sec": [list(r) for r in durations.bwd_sec],
        "recompute_sec": [list(r) for r in durations.recompute_sec],
        "comm_sec": comm_sec,
        "schedule": schedule,
    }


def cmd_plan(args):
    model = _load_model(args)
    cluster = _load_cluster(args)
    job = _make_job(args, model, cluster)
    limits = strategies.SearchLimits(
        max_tp=args.max_tp,
        max_pp=args.max_pp,
        max_vpp=args.max_vpp,
        max_ep=args.max_ep,
        max_micro_batch_size=args.max_micro_batch_size,
        sequence_parallel=not args.no_sp,
    )
    candidates = strategies.enumerate_strategies(model, cluster, job, limits)
    log.info("enumerated %d strategies", len(candidates))
    ranked = strategies.rank(candidates, model, cluster, job, top_k=args.top_k)
    if not ranked:
        raise Infeasible("no memory-feasible strategy in the search space")
    top = ranked[0]
    chosen = balancer.balance(top.strategy, model, cluster, job)
    durations, comm = cost_model.plan_durations(model, top.strategy, chosen.plan, cluster)
    schedule = _schedule_for(top.strategy)
    trace = pipe_sim.simulate(durations, top.strategy.num_micro_batches, comm, schedule)

    digest = report.inputs_digest(
        config.dump_model_config(model),
        config.dump_cluster(cluster),
        {
            "global_batch": job.global_batch,
            "seq_len": job.seq_len,
            "max_device_memory_bytes": job.max_device_memory_bytes,
            "top_k": args.top_k,
            "limits": {
                "max_tp": limits.max_tp,
                "max_pp": limits.max_pp,
                "max_vpp": limits.max_vpp,
                "max_ep": limits.max_ep,
                "max_micro_batch_size": limits.max_micro_batch_size,
                "sequence_parallel": limits.sequence_parallel,
            },
        },
    )
    trace_refs = [
        {
            "schedule": schedule,
            "strategy": top.strategy.label(),
            "makespan_sec": trace.makespan_sec,
            "bubble_ratio": trace.bubble_ratio,
            "path": args.trace_out or "",
        }
    ]
    doc = report.build_plan_report(digest, ranked, chosen, trace_refs)
    _emit(args.out, report.emit_report(doc))
    if args.trace_out:
        _write(args.trace_out, report.canonical_json(report.trace_to_dict(trace)) + "\n")
    if args.plan_out:
        spec = _sim_spec_dict(top.strategy, chosen.plan, durations, comm, schedule)
        _write(args.plan_out, report.canonical_json(spec) + "\n")
    if args.gantt:
        _write(args.gantt, report.render_gantt(trace, "svg"))
    return 0


def cmd_balance(args):
    model = _load_model(args)
    cluster = _load_cluster(args)
    job = _make_job(args, model, cluster)
    world = cluster.world_size
    if world % (args.tp * args.pp) != 0:
        raise InvalidStrategy(f"tp*pp={args.tp * args.pp} does not divide world={world}")
    dp = world // (args.tp * args.pp)
    if job.global_batch % (dp * args.micro_batch_size) != 0:
        raise InvalidStrategy("global batch must equal dp * micro_batch_size * m")
    m = job.global_batch // (dp * args.micro_batch_size)
    strategy = strategies.ParallelStrategy(
        dp=dp,
        tp=args.tp,
        pp=args.pp,
        vpp=args.vpp,
        ep=args.ep,
        op=args.op if args.op else dp,
        micro_batch_size=args.micro_batch_size,
        num_micro_batches=m,
        sp_enabled=not args.no_sp and args.tp > 1,
    )
    strategies.validate_strategy(strategy, model, cluster, job)
    result = balancer.balance(strategy, model, cluster, job)
    doc = report.balance_to_dict(result)
    doc["strategy"] = report.strategy_to_dict(strategy)
    if args.plan_out:
        durations, comm = cost_model.plan_durations(model, strategy, result.plan, cluster)
        spec = _sim_spec_dict(strategy, result.plan, durations, comm, _schedule_for(strategy))
        _write(args.plan_out, report.canonical_json(spec) + "\n")
    _emit(args.out, report.canonical_json(doc) + "\n")
    return 0


def _load_sim_spec(path):
    try:
        raw = json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    try:
        durations = pipe_sim.Durations(
            tuple(tuple(float(x) for x in row) for row in raw["fwd_sec"]),
            tuple(tuple(float(x) for x in row) for row in raw["bwd_sec"]),
            tuple(tuple(float(x) for x in row) for row in raw["recompute_sec"]),
        )
        return (
            durations,
            int(raw["micro_batches"]),
            float(raw.get("comm_sec", 0.0)),
            raw.get("schedule", "one_f_one_b"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: plan spec missing/invalid field ({exc})") from exc


def cmd_simulate(args):
    durations, m, comm, schedule = _load_sim_spec(args.plan)
    if args.schedule:
        schedule = args.schedule
    if args.micro_batches:
        m = args.micro_batches
    if args.comm_sec is not None:
        comm = args.comm_sec
    trace = pipe_sim.simulate(durations, m, comm, schedule)
    _emit(args.out, report.canonical_json(report.trace_to_dict(trace)) + "\n")
    if args.gantt:
        _write(args.gantt, report.render_gantt(trace, "svg"))
    if args.text:
        sys.stdout.write(report.render_gantt(trace, "text"))
    return 0


def cmd_ep_comm(args):
    cluster = _load_cluster(args)
    layout = ep_comm.EpLayout.contiguous(args.experts, args.ep_nodes, args.ep_devices_per_node)
    token_bytes = args.hidden * args.dtype_bytes
    routing = ep_comm.route_tokens(
        args.tokens_per_device,
        args.top_k,
        layout,
        skew=args.skew,
        seed=args.seed,
        token_bytes=token_bytes,
    )
    serial = ep_comm.OverlapConfig(num_streams=1, ffn_compute_sec=args.ffn_sec)
    overlapped = ep_comm.OverlapConfig(num_streams=args.streams, ffn_compute_sec=args.ffn_sec)
    rows = []
    for t in ep_comm.compare_modes(routing, layout, cluster, serial):
        t2 = ep_comm.ep_time(t, cluster, overlapped)
        rows.append(
            {
                "mode": t.mode,
                "inter_node_bytes_per_device": t.inter_node_bytes_per_device,
                "intra_node_bytes_per_device": t.intra_node_bytes_per_device,
                "exposed_sec_serial": t.est_time_sec,
                f"exposed_sec_streams_{args.streams}": t2,
            }
        )
    doc = {
        "ep_size": layout.ep_size,
        "nodes_in_group": layout.num_nodes_in_group,
        "devices_per_node_in_group": layout.devices_per_node_in_group,
        "experts": layout.num_routed_experts,
        "top_k": args.top_k,
        "tokens_per_device": args.tokens_per_device,
        "token_bytes": token_bytes,
        "skew": args.skew,
        "seed": args.seed,
        "streams": args.streams,
        "ffn_compute_sec": args.ffn_sec,
        "modes": rows,
    }
    if args.json:
        _emit(args.out, report.canonical_json(doc) + "\n")
    else:
        lines = [
            f"EP {layout.ep_size} = {layout.num_nodes_in_group} nodes x "
            f"{layout.devices_per_node_in_group} devices, top-{args.top_k}, "
            f"{args.tokens_per_device} tokens/device",
            f"{'mode':<14}{'inter MB/dev':>14}{'intra MB/dev':>14}"
            f"{'serial ms':>12}{'overlap ms':>12}",
        ]
        for r in rows:
            lines.append(
                f"{r['mode']:<14}"
                f"{r['inter_node_bytes_per_device'] / 1e6:>14.2f}"
                f"{r['intra_node_bytes_per_device'] / 1e6:>14.2f}"
                f"{r['exposed_sec_serial'] * 1e3:>12.3f}"
                f"{r[f'exposed_sec_streams_{args.streams}'] * 1e3:>12.3f}"
            )
        _emit(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_pack(args):
    try:
        raw = json.loads(_read(args.input))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{args.input}: not valid JSON ({exc})") from exc
    if not isinstance(raw, list) or not all(isinstance(x, list) for x in raw):
        raise ParseError(f"{args.input}: expected a JSON list of doc-length lists")
    samples = [attn_balance.SampleSpec.from_lengths(x) for x in raw]
    before = attn_balance.identity_assignment(samples, args.devices, args.samples_per_device)
    after = attn_balance.balance_samples(samples, args.devices, args.samples_per_device)
    doc = {
        "devices": args.devices,
        "samples_per_device": args.samples_per_device,
        "device_of_sample": list(after.device_of_sample),
        "loads": list(after.loads),
        "imbalance_before": attn_balance.imbalance(before),
        "imbalance_after": attn_balance.imbalance(after),
    }
    _emit(args.out, report.canonical_json(doc) + "\n")
    return 0


def cmd_presets(args):
    rows = []
    for name in config.preset_names():
        m = config.preset(name)
        rows.append(
            {
                "name": name,
                "num_layers": m.num_layers,
                "hidden_size": m.hidden_size,
                "num_heads": m.num_heads,
                "vocab_size": m.vocab_size,
                "num_routed_experts": m.num_routed_experts,
                "expert_intermediate_size": m.expert_intermediate_size,
                "experts_per_token": m.experts_per_token,
                "num_shared_experts": m.num_shared_experts,
            }
        )
    if args.json:
        _emit(args.out, report.canonical_json({"presets": rows}) + "\n")
    else:
        cols = [
            ("name", 7),
            ("num_layers", 11),
            ("hidden_size", 12),
            ("num_heads", 10),
            ("num_routed_experts", 19),
            ("expert_intermediate_size", 25),
            ("experts_per_token", 18),
            ("num_shared_experts", 19),
        ]
        head = "".join(f"{name:>{w}}" for name, w in cols)
        lines = [head]
        for r in rows:
            lines.append("".join(f"{r[name]:>{w}}" for name, w in cols))
        _emit(args.out, "\n".join(lines) + "\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="moeplan",
        description="Plan and simulate multi-dimensional MoE training parallelization.",
    )
    parser.add_argument("--version", action="version", version=f"moeplan {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("plan", help="enumerate, rank, balance, and simulate strategies")
    _add_model_cluster_flags(p)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--max-tp", type=int)
    p.add_argument("--max-pp", type=int)
    p.add_argument("--max-vpp", type=int, default=4)
    p.add_argument("--max-ep", type=int)
    p.add_argument("--max-micro-batch-size", type=int, default=8)
    p.add_argument("--no-sp", action="store_true", help="disable sequence parallelism")
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--trace-out", help="write the chosen plan's trace JSON here")
    p.add_argument("--plan-out", help="write a simulatable plan spec here")
    p.add_argument("--gantt", help="write an SVG gantt of the chosen plan here")
    p.set_defaults(func=cmd_plan)

    p = subs.add_parser("balance", help="balance one explicit strategy")
    _add_model_cluster_flags(p)
    p.add_argument("--tp", type=int, required=True)
    p.add_argument("--pp", type=int, required=True)
    p.add_argument("--vpp", type=int, default=1)
    p.add_argument("--ep", type=int, default=1)
    p.add_argument("--op", type=int, help="optimizer parallel degree (default dp)")
    p.add_argument("--micro-batch-size", type=int, required=True)
    p.add_argument("--no-sp", action="store_true")
    p.add_argument("--out", help="result path (default stdout)")
    p.add_argument("--plan-out", help="write a simulatable plan spec here")
    p.set_defaults(func=cmd_balance)

    p = subs.add_parser("simulate", help="simulate a plan spec file")
    p.add_argument("--plan", required=True, help="plan spec JSON from plan/balance")
    p.add_argument("--schedule", choices=pipe_sim.schedule_kinds())
    p.add_argument("--micro-batches", type=int)
    p.add_argument("--comm-sec", type=float)
    p.add_argument("--out", help="trace path (default stdout)")
    p.add_argument("--gantt", help="write an SVG gantt here")
    p.add_argument("--text", action="store_true", help="print a text timeline")
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("ep-comm", help="compare EP dispatch modes and overlap")
    p.add_argument("--cluster", required=True)
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--ep-nodes", type=int, required=True)
    p.add_argument("--ep-devices-per-node", type=int, required=True)
    p.add_argument("--top-k", type=int, required=True)
    p.add_argument("--tokens-per-device", type=int, required=True)
    p.add_argument("--hidden", type=int, required=True)
    p.add_argument("--dtype-bytes", type=int, default=2)
    p.add_argument("--skew", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--streams", type=int, default=2)
    p.add_argument("--ffn-sec", type=float, default=0.0)
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ep_comm)

    p = subs.add_parser("pack", help="balance packed samples across devices")
    p.add_argument("--input", required=True, help="JSON list of doc-length lists")
    p.add_argument("--devices", type=int, required=True)
    p.add_argument("--samples-per-device", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pack)

    p = subs.add_parser("presets", help="list built-in model configurations")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_presets)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("MOEPLAN_LOG", "WARNING").upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _NO_SOLUTION as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _INVALID_INPUT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PlannerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
