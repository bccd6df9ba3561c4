"""Command-line harness: gen | plan | sim | compare | sweep | trace.

All file units are bytes and integer microseconds; bandwidths on the command
line are decimal GB/s (GB = 1e9), converted internally to bytes/us.
Config precedence: CLI flags > spec file > preset defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, fields, replace

from .cache_insertion import check_residency_safety, insert_cache_ops
from .graph_ir import (
    GraphProgram,
    GraphValidationError,
    Schedule,
    graph_from_json,
    graph_to_json,
    make_schedule,
    schedule_from_dict,
    schedule_to_dict,
    topo_order,
    validate,
)
from .machine_sim import (
    MachineModel,
    SimReport,
    machine_from_dict,
    report_to_dict,
    simulate,
    trace_to_json,
)
from .memory_analysis import CandidatePolicy, compute_lifetimes, plan_to_dict, select_candidates
from .order_refinement import CostWeights, RefineRecord, refine_order_with_log
from .workloads import (
    MACHINE_PRESETS,
    WORKLOAD_PRESETS,
    DecodeSpec,
    TrainSpec,
    gen_llm_decode,
    gen_random_dag,
    gen_transformer_train,
    generate_preset,
    run_reactive_baseline,
)

GBPS_TO_BYTES_PER_US = 1_000.0  # 1 GB/s = 1e9 B / 1e6 us


@dataclass
class PlanResult:
    graph: GraphProgram
    schedule: Schedule
    plan: object
    log: list[RefineRecord]


def plan_graph(
    g: GraphProgram,
    m: MachineModel,
    policy: CandidatePolicy | None = None,
    weights: CostWeights | None = None,
) -> PlanResult:
    """Full planning pipeline: lifetimes -> candidates -> insertion -> refinement."""
    s = topo_order(g)
    lifetimes = compute_lifetimes(g, s)
    plan = select_candidates(g, s, lifetimes, m, policy)
    g2 = insert_cache_ops(g, s, plan)
    hazards = check_residency_safety(g2)
    if hazards:  # insertion guarantees safety; reaching this is a bug
        raise GraphValidationError([])
    s2 = topo_order(g2)
    refined, log = refine_order_with_log(g2, s2.order, m, weights)
    return PlanResult(graph=g2, schedule=refined, plan=plan, log=log)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        with open(path, "w") as f:
            f.write(text)


def _load_graph(path: str) -> GraphProgram:
    with open(path) as f:
        g = graph_from_json(f.read())
    issues = validate(g)
    if issues:
        raise GraphValidationError(issues)
    return g


def _load_machine(args) -> MachineModel:
    if getattr(args, "machine_preset", None):
        preset = MACHINE_PRESETS.get(args.machine_preset)
        if preset is None:
            raise KeyError(f"unknown machine preset {args.machine_preset!r} (have {sorted(MACHINE_PRESETS)})")
        m = preset
    elif getattr(args, "machine", None):
        with open(args.machine) as f:
            m = machine_from_dict(json.load(f))
    else:
        raise SystemExit("one of --machine or --machine-preset is required")
    if getattr(args, "bandwidth_gbps", None) is not None:
        bw = args.bandwidth_gbps * GBPS_TO_BYTES_PER_US
        m = replace(m, r2d_bandwidth_bytes_per_us=bw, d2r_bandwidth_bytes_per_us=bw)
    return m


def _workload_from_spec_dict(d: dict) -> TrainSpec | DecodeSpec:
    kind = d.get("type")
    rest = {k: v for k, v in d.items() if k != "type"}
    if kind == "train":
        return TrainSpec(**rest)
    if kind == "decode":
        return DecodeSpec(**rest)
    raise ValueError("workload spec file needs \"type\": \"train\" or \"decode\"")


def _apply_overrides(spec, overrides: list[str]):
    valid = {f.name: f.type for f in fields(spec)}
    changes = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in valid:
            raise ValueError(f"unknown spec field {key!r} (have {sorted(valid)})")
        current = getattr(spec, key)
        if isinstance(current, bool):
            changes[key] = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            changes[key] = int(raw)
        else:
            changes[key] = raw
    return replace(spec, **changes)


def cmd_gen(args) -> int:
    if args.random_dag is not None:
        g = gen_random_dag(seed=args.seed + args.random_dag)
    elif args.spec:
        with open(args.spec) as f:
            spec = _workload_from_spec_dict(json.load(f))
        spec = _apply_overrides(spec, args.set or [])
        g = gen_transformer_train(spec) if isinstance(spec, TrainSpec) else gen_llm_decode(spec)
    elif args.preset:
        if args.set and args.preset != "toy6":
            spec = _apply_overrides(WORKLOAD_PRESETS[args.preset], args.set)
            g = gen_transformer_train(spec) if isinstance(spec, TrainSpec) else gen_llm_decode(spec)
        else:
            g = generate_preset(args.preset)
    else:
        raise SystemExit("one of --preset, --spec or --random-dag is required")
    _write(args.out, graph_to_json(g))
    return 0


def _policy_from_args(args) -> CandidatePolicy:
    kw = {}
    if args.min_gap_ratio is not None:
        kw["min_gap_ratio"] = args.min_gap_ratio
    if args.min_tensor_bytes is not None:
        kw["min_tensor_bytes"] = args.min_tensor_bytes
    if args.kinds:
        kw["kinds_enabled"] = frozenset(args.kinds.split(","))
    return CandidatePolicy(**kw)


def cmd_plan(args) -> int:
    g = _load_graph(args.graph)
    m = _load_machine(args)
    policy = _policy_from_args(args)
    weights = CostWeights(alpha=args.alpha, beta=args.beta)
    result = plan_graph(g, m, policy, weights)
    _write(args.out_graph, graph_to_json(result.graph))
    _write(args.out_schedule, json.dumps(schedule_to_dict(result.schedule), indent=2))
    log_rows = [
        {
            "op": r.op,
            "before_pos": r.before_pos,
            "after_pos": r.after_pos,
            "evaluation": {
                "position": r.evaluation.position,
                "transfer_completion_us": r.evaluation.transfer_completion_us,
                "overlap_us": r.evaluation.overlap_us,
                "exposed_us": r.evaluation.exposed_us,
                "residency_byte_us": r.evaluation.residency_byte_us,
                "cost": r.evaluation.cost,
            },
        }
        for r in result.log
    ]
    _write(args.out_log, json.dumps(log_rows, indent=2))
    if args.emit_plan:
        _write(args.emit_plan, json.dumps(plan_to_dict(result.plan), indent=2))
    return 0


def _finish_sim(report: SimReport, out: str | None) -> int:
    _write(out, json.dumps(report_to_dict(report), indent=2))
    if report.oom is not None:
        if out is not None and out != "-":
            sys.stdout.write(json.dumps(report_to_dict(report)["oom"]) + "\n")
        return 2
    return 0


def cmd_sim(args) -> int:
    g = _load_graph(args.graph)
    m = _load_machine(args)
    if args.schedule:
        with open(args.schedule) as f:
            s = schedule_from_dict(json.load(f))
        if not s.streams:
            s = make_schedule(g, s.order)
    else:
        s = topo_order(g)
    report = simulate(g, s, m)
    return _finish_sim(report, args.out)


def cmd_trace(args) -> int:
    g = _load_graph(args.graph)
    m = _load_machine(args)
    if args.schedule:
        with open(args.schedule) as f:
            s = schedule_from_dict(json.load(f))
        if not s.streams:
            s = make_schedule(g, s.order)
    else:
        s = topo_order(g)
    report = simulate(g, s, m)
    _write(args.out, trace_to_json(report, indent=2))
    return 2 if report.oom is not None else 0


def cmd_compare(args) -> int:
    g = _load_graph(args.graph) if args.graph else generate_preset(args.preset)
    m = _load_machine(args)
    s = topo_order(g)
    baseline = simulate(g, s, m)
    reactive = run_reactive_baseline(g, s, m)
    result = plan_graph(g, m, _policy_from_args(args), CostWeights(alpha=args.alpha, beta=args.beta))
    graph_driven = simulate(result.graph, result.schedule, m)

    rows = [
        ("no-offload", baseline),
        ("reactive", reactive),
        ("graph-driven", graph_driven),
    ]
    header = f"{'variant':<14}{'peak_bytes':>16}{'makespan_us':>14}{'exposed_us':>12}{'defrag':>8}"
    lines = [header, "-" * len(header)]
    for name, r in rows:
        lines.append(
            f"{name:<14}{r.peak_device_bytes:>16}{r.makespan_us:>14}{r.exposed_comm_us:>12}{r.defrag_events:>8}"
        )
    _write(None, "\n".join(lines))
    if args.json_out:
        _write(args.json_out, json.dumps({name: report_to_dict(r) for name, r in rows}, indent=2))
    if any(r.oom is not None for _, r in rows):
        for name, r in rows:
            if r.oom is not None:
                sys.stdout.write(json.dumps({name: report_to_dict(r)["oom"]}) + "\n")
        return 2
    return 0


def cmd_sweep(args) -> int:
    g = _load_graph(args.graph) if args.graph else generate_preset(args.preset)
    base_machine = _load_machine(args)
    bandwidths = [float(b) for b in args.bandwidths.split(",")]
    # one fixed plan (derived at the first bandwidth setting), swept machines
    m0 = replace(
        base_machine,
        r2d_bandwidth_bytes_per_us=bandwidths[0] * GBPS_TO_BYTES_PER_US,
        d2r_bandwidth_bytes_per_us=bandwidths[0] * GBPS_TO_BYTES_PER_US,
    )
    result = plan_graph(g, m0, _policy_from_args(args), CostWeights(alpha=args.alpha, beta=args.beta))
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["bandwidth_gbps", "makespan_us", "exposed_us", "overlapped_us", "peak_bytes", "defrag_events"])
    exposed_seq = []
    for bw_gbps in bandwidths:
        bw = bw_gbps * GBPS_TO_BYTES_PER_US
        m = replace(base_machine, r2d_bandwidth_bytes_per_us=bw, d2r_bandwidth_bytes_per_us=bw)
        r = simulate(result.graph, result.schedule, m)
        if r.oom is not None:
            sys.stdout.write(json.dumps(report_to_dict(r)["oom"]) + "\n")
            return 2
        exposed_seq.append(r.exposed_comm_us)
        writer.writerow([bw_gbps, r.makespan_us, r.exposed_comm_us, r.overlapped_comm_us, r.peak_device_bytes, r.defrag_events])
    _write(args.out, out.getvalue())
    increasing = all(b2 >= b1 for b1, b2 in zip(bandwidths, bandwidths[1:]))
    if increasing and any(e2 > e1 for e1, e2 in zip(exposed_seq, exposed_seq[1:])):
        sys.stderr.write("sweep self-check failed: exposed_us increased with bandwidth\n")
        return 3
    return 0


def _add_machine_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--machine", help="machine model JSON file")
    p.add_argument("--machine-preset", help=f"named machine ({', '.join(sorted(MACHINE_PRESETS))})")
    p.add_argument("--bandwidth-gbps", type=float, default=None, help="override both link bandwidths, GB/s")


def _add_policy_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kinds", help="comma-separated tensor kinds eligible for offload")
    p.add_argument("--min-gap-ratio", type=float, default=None)
    p.add_argument("--min-tensor-bytes", type=int, default=None)
    p.add_argument("--alpha", type=float, default=1.0, help="cost per us of exposed latency")
    p.add_argument("--beta", type=float, default=1e-9, help="cost per byte-us of premature residency")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tiersched", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a workload graph")
    p.add_argument("--preset", help=f"workload preset ({', '.join(sorted(WORKLOAD_PRESETS) + ['toy6'])})")
    p.add_argument("--spec", help="workload spec JSON file with a 'type' key")
    p.add_argument("--random-dag", type=int, default=None, metavar="N", help="emit the N-th random DAG for the current seed")
    p.add_argument("--seed", type=int, default=0, help="seed for the random-DAG path (the only stochastic path)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a spec field")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("plan", help="insert cache ops and refine the execution order")
    p.add_argument("--graph", required=True)
    _add_machine_args(p)
    _add_policy_args(p)
    p.add_argument("--out-graph", default="-")
    p.add_argument("--out-schedule", default="-")
    p.add_argument("--out-log", default="-")
    p.add_argument("--emit-plan", default=None, help="also write the offload plan JSON")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("sim", help="simulate a planned graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--schedule", default=None, help="schedule JSON; topo order if omitted")
    _add_machine_args(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("compare", help="no-offload vs reactive vs graph-driven on one workload")
    p.add_argument("--graph")
    p.add_argument("--preset")
    _add_machine_args(p)
    _add_policy_args(p)
    p.add_argument("--json-out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="bandwidth sweep of the graph-driven pipeline")
    p.add_argument("--graph")
    p.add_argument("--preset")
    _add_machine_args(p)
    _add_policy_args(p)
    p.add_argument("--bandwidths", required=True, help="comma-separated GB/s values")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("trace", help="emit a Chrome-trace-event timeline")
    p.add_argument("--graph", required=True)
    p.add_argument("--schedule", default=None)
    _add_machine_args(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_trace)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GraphValidationError as e:
        sys.stderr.write(f"error: {e}\n")
        for v in e.violations[:20]:
            sys.stderr.write(f"  - [{v.code}] {v.detail}\n")
        return 1
    except (ValueError, KeyError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
