"""tiersched: graph-level remote-memory offload planning and simulation.

Pipeline: generate or load a computation graph, analyze tensor lifetimes,
select offload candidates, rewrite the graph with explicit Prefetch / Store /
Detach nodes, refine their execution order to hide transfer latency, and
verify the result on a deterministic two-tier machine simulator.
"""

from .graph_ir import (
    COMPUTE,
    DETACH,
    PREFETCH,
    STORE,
    GraphError,
    GraphProgram,
    GraphValidationError,
    OpNode,
    Schedule,
    TensorDecl,
    UnknownTensorError,
    Violation,
    consumers,
    graph_from_dict,
    graph_from_json,
    graph_to_dict,
    graph_to_json,
    is_topological,
    make_schedule,
    topo_order,
    validate,
)
from .machine_sim import (
    D2R,
    R2D,
    DeviceAllocator,
    MachineModel,
    OomRecord,
    SimReport,
    SimulationError,
    emit_trace,
    machine_from_dict,
    machine_to_dict,
    peak_memory_no_offload,
    report_to_dict,
    report_to_json,
    simulate,
    trace_to_json,
)
from .memory_analysis import (
    CandidatePolicy,
    Lifetime,
    OffloadPlan,
    PlanEntry,
    compute_lifetimes,
    estimate_transfer_us,
    plan_from_dict,
    plan_to_dict,
    plan_to_json,
    select_candidates,
)
from .cache_insertion import Hazard, PlanError, check_residency_safety, insert_cache_ops
from .order_refinement import (
    CostWeights,
    OracleResult,
    PositionEvaluation,
    RefineRecord,
    evaluate_position,
    exhaustive_oracle,
    feasible_positions,
    refine_order,
    refine_order_with_log,
)
from .workloads import (
    MACHINE_PRESETS,
    WORKLOAD_PRESETS,
    DecodeSpec,
    TrainSpec,
    build_latency_hiding_toy,
    gen_llm_decode,
    gen_random_dag,
    gen_transformer_train,
    generate_preset,
    run_reactive_baseline,
)

__version__ = "0.1.0"
