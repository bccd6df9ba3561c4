"""Deterministic workload generators and the reactive (runtime-driven) baseline.

Two graph families: transformer training (per-layer activations, gradients and
optimizer states) and autoregressive LLM decode (per-layer KV blocks). Sizes
and costs in the shipped presets are synthetic: they are proportioned to the
model families they mimic, not measured.

The reactive executor models runtime-driven offloading: loads are issued on
demand right before consumption, evictions are LRU under pressure, and every
transfer pays an orchestration overhead on top of the wire time.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .graph_ir import (
    COMPUTE,
    PREFETCH,
    STREAM_COMPUTE,
    STREAM_DMA_IN,
    STREAM_DMA_OUT,
    GraphProgram,
    OpNode,
    Schedule,
    TensorDecl,
    topo_order,
)
from .machine_sim import (
    D2R,
    R2D,
    DeviceAllocator,
    MachineModel,
    OomRecord,
    SimReport,
    SimulationError,
    TimelineEntry,
    _family_plan,
    align_up,
)
from .memory_analysis import CandidatePolicy, OffloadPlan, compute_lifetimes, select_candidates

KIB = 1024
MIB = 1024 * 1024
GIB = 1024 * 1024 * 1024


@dataclass(frozen=True)
class TrainSpec:
    layers: int
    bytes_per_activation: int
    bytes_per_weight_per_layer: int
    bytes_per_optimizer_state_per_layer: int
    fwd_cost_us: int
    bwd_cost_us: int
    update_cost_us: int

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        for f in ("bytes_per_activation", "bytes_per_weight_per_layer", "bytes_per_optimizer_state_per_layer", "fwd_cost_us", "bwd_cost_us", "update_cost_us"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")


@dataclass(frozen=True)
class DecodeSpec:
    layers: int
    kv_bytes_per_layer_per_token: int
    weight_bytes_per_layer: int
    prefill_tokens: int
    decode_steps: int
    prefill_cost_us_per_layer: int
    decode_cost_us_per_layer: int
    weights_initial_tier: str = "device"
    kv_initial_tier: str = "device"  # used when the graph starts at decode
    include_prefill: bool = True
    kv_decode_access: str = "per_step"  # per_step | first_step | none
    chain_bytes: int = 512
    workspace_bytes: int = 0  # per-attention scratch, dies with its op
    workspace_alt_bytes: int = 0  # layer-0 scratch size when nonzero (mixed-size churn)
    state_bytes_per_step: int = 0  # persistent per-step output state

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.kv_decode_access not in ("per_step", "first_step", "none"):
            raise ValueError("kv_decode_access must be per_step, first_step or none")
        for f in ("kv_bytes_per_layer_per_token", "weight_bytes_per_layer", "prefill_tokens", "decode_steps", "prefill_cost_us_per_layer", "decode_cost_us_per_layer", "chain_bytes", "workspace_bytes", "workspace_alt_bytes", "state_bytes_per_step"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")

    @property
    def kv_bytes_per_layer(self) -> int:
        return self.kv_bytes_per_layer_per_token * self.prefill_tokens


def _w(i: int, width: int = 2) -> str:
    return f"{i:0{width}d}"


def gen_transformer_train(spec: TrainSpec) -> GraphProgram:
    """Forward chain, reverse backward chain, one optimizer update per layer.

    Optimizer states are persistent inputs; each update writes a new version
    aliased to the same bytes. Weights are pinned device residents.
    """
    L = spec.layers
    width = max(2, len(str(L - 1)))
    tensors: list[TensorDecl] = []
    ops: list[OpNode] = []
    for l in range(L):
        i = _w(l, width)
        tensors.append(TensorDecl(f"w_{i}", spec.bytes_per_weight_per_layer, "weight", pinned=True))
        tensors.append(TensorDecl(f"act_{i}", spec.bytes_per_activation, "activation"))
        tensors.append(TensorDecl(f"grad_{i}", spec.bytes_per_activation, "gradient"))
        tensors.append(TensorDecl(f"opt_{i}", spec.bytes_per_optimizer_state_per_layer, "optimizer_state"))
        tensors.append(
            TensorDecl(
                f"opt_{i}_next",
                spec.bytes_per_optimizer_state_per_layer,
                "optimizer_state",
                alias_of=f"opt_{i}",
            )
        )
    for l in range(L):
        i = _w(l, width)
        inputs = [f"w_{i}"]
        if l > 0:
            inputs.insert(0, f"act_{_w(l - 1, width)}")
        ops.append(OpNode(f"fwd_{i}", COMPUTE, tuple(inputs), (f"act_{i}",), spec.fwd_cost_us))
    for l in range(L - 1, -1, -1):
        i = _w(l, width)
        inputs = [f"act_{i}"]
        if l < L - 1:
            inputs.append(f"grad_{_w(l + 1, width)}")
        ops.append(OpNode(f"bwd_{i}", COMPUTE, tuple(inputs), (f"grad_{i}",), spec.bwd_cost_us))
    for l in range(L):
        i = _w(l, width)
        ops.append(OpNode(f"upd_{i}", COMPUTE, (f"grad_{i}", f"opt_{i}"), (f"opt_{i}_next",), spec.update_cost_us))
    return GraphProgram(tensors=tuple(tensors), ops=tuple(ops))


def gen_llm_decode(spec: DecodeSpec) -> GraphProgram:
    """Per-layer prefill producing KV blocks, then steps x layers attention ops.

    KV blocks are sized at their final prefill length. When include_prefill is
    False the KV blocks enter as preloaded state on the configured tier
    (a decode-serving snapshot). kv_decode_access controls whether decode ops
    read the full blocks every step, only on the first step, or not at all
    (remote-side processing of the cache).
    """
    L = spec.layers
    width = max(2, len(str(L - 1)))
    tensors: list[TensorDecl] = []
    ops: list[OpNode] = []
    for l in range(L):
        i = _w(l, width)
        wtier = spec.weights_initial_tier
        tensors.append(
            TensorDecl(f"w_{i}", spec.weight_bytes_per_layer, "weight", initial_tier=wtier, pinned=wtier == "device")
        )
        tensors.append(
            TensorDecl(
                f"kv_{i}",
                max(spec.kv_bytes_per_layer, 1),
                "kv_block",
                initial_tier=spec.kv_initial_tier if not spec.include_prefill else "device",
            )
        )
    if spec.include_prefill:
        for l in range(L):
            i = _w(l, width)
            tensors.append(TensorDecl(f"pch_{i}", spec.chain_bytes, "workspace"))
            inputs = [f"w_{i}"]
            if l > 0:
                inputs.insert(0, f"pch_{_w(l - 1, width)}")
            ops.append(
                OpNode(f"pf_{i}", COMPUTE, tuple(inputs), (f"kv_{i}", f"pch_{i}"), spec.prefill_cost_us_per_layer)
            )
    for s in range(spec.decode_steps):
        ss = _w(s, 3)
        for l in range(L):
            i = _w(l, width)
            inputs = [f"w_{i}"]
            if spec.kv_decode_access == "per_step" or (spec.kv_decode_access == "first_step" and s == 0):
                inputs.insert(0, f"kv_{i}")
            if l > 0:
                inputs.append(f"h_{ss}_{_w(l - 1, width)}")
            elif s > 0:
                inputs.append(f"h_{_w(s - 1, 3)}_{_w(L - 1, width)}")
            elif spec.include_prefill:
                inputs.append(f"pch_{_w(L - 1, width)}")
            outputs = [f"h_{ss}_{i}"]
            tensors.append(TensorDecl(f"h_{ss}_{i}", spec.chain_bytes, "workspace"))
            ws_bytes = spec.workspace_bytes
            if l == 0 and spec.workspace_alt_bytes > 0:
                ws_bytes = spec.workspace_alt_bytes
            if ws_bytes > 0:
                tensors.append(TensorDecl(f"ws_{ss}_{i}", ws_bytes, "workspace"))
                outputs.append(f"ws_{ss}_{i}")
            if spec.state_bytes_per_step > 0 and l == 0:
                # emitted right above the scratch: a persistent divider in the heap
                tensors.append(TensorDecl(f"state_{ss}", spec.state_bytes_per_step, "activation"))
                outputs.append(f"state_{ss}")
            ops.append(OpNode(f"attn_{ss}_{i}", COMPUTE, tuple(inputs), tuple(outputs), spec.decode_cost_us_per_layer))
    return GraphProgram(tensors=tuple(tensors), ops=tuple(ops))


def build_latency_hiding_toy(bandwidth_bytes_per_us: float = 33_600.0) -> GraphProgram:
    """Six-op toy: a 5-op compute chain plus one prefetch of a remote weight.

    The weight is sized so its transfer costs 2.5 compute ops: the earliest
    placement fully hides it at the price of extra residency, late placements
    expose it. Used by the placement-regime tests and the `toy6` preset.
    """
    cost = 1000
    wbytes = int(round(2.5 * cost * bandwidth_bytes_per_us))
    tensors = [TensorDecl("w_main", wbytes, "weight", initial_tier="remote")]
    ops: list[OpNode] = []
    for i in range(5):
        inputs = (f"t{i - 1}",) if i > 0 else ()
        outputs = (f"t{i}",)
        tensors.append(TensorDecl(f"t{i}", 512, "workspace"))
        if i == 4:
            inputs = inputs + ("w_main",)
        ops.append(OpNode(f"c{i}", COMPUTE, inputs, outputs, cost))
    ops.append(OpNode("pf__w_main", PREFETCH, tensor_id="w_main"))
    return GraphProgram(tensors=tuple(tensors), ops=tuple(ops), control_edges=(("pf__w_main", "c4"),))


def gen_random_dag(seed: int, max_compute: int = 38, max_cache_entries: int = 4) -> GraphProgram:
    """Seeded random compute DAG with cache ops injected through the real pipeline.

    Node count stays <= 50 (compute plus at most 3 * max_cache_entries cache
    ops); the only randomness source is the seed.
    """
    rng = random.Random(seed)
    n = rng.randint(3, max_compute)
    tensors: list[TensorDecl] = []
    ops: list[OpNode] = []
    if rng.random() < 0.5:
        tensors.append(TensorDecl("rw_00", rng.randint(1, 32) * MIB, "weight", initial_tier="remote"))
    for i in range(n):
        tensors.append(TensorDecl(f"t_{i:02d}", rng.randint(1, 64) * MIB, "activation"))
        inputs = []
        if i > 0:
            for j in rng.sample(range(i), k=min(i, rng.randint(1, 2))):
                inputs.append(f"t_{j:02d}")
        if tensors[0].id == "rw_00" and rng.random() < 0.15:
            inputs.append("rw_00")
        ops.append(OpNode(f"op_{i:02d}", COMPUTE, tuple(inputs), (f"t_{i:02d}",), rng.randint(100, 5000)))
    g = GraphProgram(tensors=tuple(tensors), ops=tuple(ops))
    s = topo_order(g)
    machine = MachineModel(
        device_capacity_bytes=64 * GIB,
        remote_capacity_bytes=1024 * GIB,
        r2d_bandwidth_bytes_per_us=rng.choice([10_000.0, 33_600.0, 70_000.0]),
        d2r_bandwidth_bytes_per_us=33_600.0,
    )
    lanes = compute_lifetimes(g, s)
    policy = CandidatePolicy(min_gap_ratio=1.0, min_tensor_bytes=1)
    plan = select_candidates(g, s, lanes, machine, policy)
    # insertion also prefetches a consumed remote weight: budget 3 nodes per
    # entry plus that extra op so total cache ops stay within 3*max_cache_entries
    budget = max_cache_entries
    if tensors[0].id == "rw_00" and g.readers_of["rw_00"]:
        budget -= 1
    entries = plan.entries[: max(budget, 0)]
    from .cache_insertion import insert_cache_ops

    return insert_cache_ops(g, s, OffloadPlan(entries=entries, policy=policy))


# --- reactive (runtime-driven) baseline --------------------------------------


def run_reactive_baseline(g: GraphProgram, s: Schedule, m: MachineModel) -> SimReport:
    """On-demand loads, LRU eviction under pressure, per-transfer orchestration cost.

    The compute stream stalls for every load/eviction it waits on; all such
    stall time is exposed. Compaction stalls are accounted as defrag time.
    """
    if any(o.kind != COMPUTE for o in g.ops):
        raise SimulationError("reactive baseline expects a graph without cache ops")
    order = list(s.order)
    pos = s.position
    alloc = DeviceAllocator(m.device_capacity_bytes, m.allocator_alignment_bytes)
    resident: set[str] = set()
    remote: set[str] = set()
    remote_used = 0
    peak_remote = 0
    peak_device = 0
    mem_samples: list[tuple[int, int]] = []
    timeline: list[TimelineEntry] = []
    exposed = 0
    dma_busy = 0
    defrag_events = 0
    defrag_time = 0
    oom: OomRecord | None = None
    end_time: dict[str, int] = {}
    t_compute = 0
    t_dma_in = 0
    t_dma_out = 0
    last_access: dict[str, int] = {}
    overhead = m.reactive_orchestration_overhead_us

    _, final_free_at = _family_plan(g, s)

    def sample(t: int) -> None:
        mem_samples.append((t, alloc.live_bytes))

    for root in sorted(r for r in g.alias_families if r not in g.producer_of):
        decl = g.tensor_by_id[root]
        if decl.initial_tier == "device":
            if alloc.alloc(root, decl.bytes) != "ok":
                oom = OomRecord("<init>", align_up(decl.bytes, m.allocator_alignment_bytes), alloc.total_free, alloc.largest_free)
                break
            resident.add(root)
            last_access[root] = -1
            sample(0)
            peak_device = max(peak_device, alloc.live_bytes)
        else:
            remote.add(root)
            remote_used += decl.bytes
            peak_remote = max(peak_remote, remote_used)

    def make_room(nbytes: int, t: int, protect: set[str], idx: int):
        """Evict LRU non-pinned tensors / compact until nbytes can be allocated.

        Returns (status, new_t, defrag_stall). Eviction is a synchronous D2R.
        """
        nonlocal defrag_events, defrag_time, dma_busy, t_dma_out, remote_used, peak_remote
        stall = 0
        while True:
            length = align_up(nbytes, m.allocator_alignment_bytes)
            if alloc.total_free >= length and alloc.largest_free >= length:
                return "ok", t, stall
            if alloc.total_free >= length:
                moved = alloc.compact_for(nbytes)
                defrag_events += 1
                d = int(round(moved / m.compaction_bandwidth_bytes_per_us))
                defrag_time += d
                stall += d
                t += d
                continue
            victims = [
                r
                for r in resident
                if r not in protect and not g.tensor_by_id[r].pinned
            ]
            if not victims:
                return "oom", t, stall
            victim = min(victims, key=lambda r: (last_access.get(r, -1), r))
            vbytes = g.tensor_by_id[victim].bytes
            start = max(t_dma_out, t)
            dur = overhead + m.transfer_us(vbytes, D2R)
            t_dma_out = start + dur
            t = start + dur
            dma_busy += dur
            timeline.append(TimelineEntry(f"d2r__{victim}__{pos[order[idx]] if idx < len(order) else idx}", STREAM_DMA_OUT, start, start + dur))
            alloc.free(victim)
            resident.discard(victim)
            if victim not in remote:
                remote.add(victim)
                remote_used += vbytes
                peak_remote = max(peak_remote, remote_used)
            sample(start + dur)

    for idx, opid in enumerate(order):
        if oom is not None:
            break
        op = g.op_by_id[opid]
        t_elig = t_compute
        for p in g.predecessors[opid]:
            t_elig = max(t_elig, end_time[p])
        t = t_elig
        op_defrag_stall = 0
        protect = {g.alias_root(x) for x in op.reads()} | {g.alias_root(x) for x in op.outputs}

        for tid in sorted({g.alias_root(x) for x in op.reads()}):
            if tid in resident:
                last_access[tid] = idx
                continue
            if tid not in remote:
                raise SimulationError(f"op {opid!r} reads {tid!r} which exists on no tier")
            decl = g.tensor_by_id[tid]
            status, t, stall = make_room(decl.bytes, t, protect, idx)
            op_defrag_stall += stall
            if status != "ok":
                oom = OomRecord(opid, align_up(decl.bytes, m.allocator_alignment_bytes), alloc.total_free, alloc.largest_free)
                break
            start = max(t_dma_in, t)
            dur = overhead + m.transfer_us(decl.bytes, R2D)
            t_dma_in = start + dur
            t = start + dur
            dma_busy += dur
            timeline.append(TimelineEntry(f"r2d__{tid}__{idx}", STREAM_DMA_IN, start, start + dur))
            res = alloc.alloc(tid, decl.bytes)
            assert res == "ok"
            resident.add(tid)
            last_access[tid] = idx
            sample(start + dur)
            peak_device = max(peak_device, alloc.live_bytes)
        if oom is not None:
            break

        for out in op.outputs:
            root = g.alias_root(out)
            if root in resident:
                last_access[root] = idx
                continue
            decl = g.tensor_by_id[root]
            status, t, stall = make_room(decl.bytes, t, protect, idx)
            op_defrag_stall += stall
            if status != "ok":
                oom = OomRecord(opid, align_up(decl.bytes, m.allocator_alignment_bytes), alloc.total_free, alloc.largest_free)
                break
            res = alloc.alloc(root, decl.bytes)
            assert res == "ok"
            resident.add(root)
            last_access[root] = idx
            sample(t)
            peak_device = max(peak_device, alloc.live_bytes)
        if oom is not None:
            break

        exposed += max(0, (t - t_elig) - op_defrag_stall)
        start = t
        endt = start + op.cost_us
        timeline.append(TimelineEntry(opid, STREAM_COMPUTE, start, endt))
        end_time[opid] = endt
        t_compute = endt
        for root in final_free_at.get(opid, ()):
            if root in resident:
                alloc.free(root)
                resident.discard(root)
                sample(endt)

    makespan = max((e.end_us for e in timeline), default=0)
    return SimReport(
        makespan_us=makespan,
        peak_device_bytes=peak_device,
        exposed_comm_us=exposed,
        overlapped_comm_us=dma_busy - exposed,
        defrag_events=defrag_events,
        defrag_time_us=defrag_time,
        timeline=timeline,
        oom=oom,
        peak_remote_bytes=peak_remote,
        mem_samples=mem_samples,
    )


# --- presets ------------------------------------------------------------------
# Synthetic desk-scale configurations. Sizes are proportioned to the workload
# families they mimic; none of them claims measured fidelity.

WORKLOAD_PRESETS: dict[str, TrainSpec | DecodeSpec] = {
    # 8-layer training step; activation transfers saturate a ~33.6 GB/s link
    # but hide behind backward compute as bandwidth grows.
    "llama8b-like": TrainSpec(
        layers=8,
        bytes_per_activation=160 * MIB,
        bytes_per_weight_per_layer=512 * MIB,
        bytes_per_optimizer_state_per_layer=16 * MIB,
        fwd_cost_us=4000,
        bwd_cost_us=4000,
        update_cost_us=1000,
    ),
    # prefill + decode pipeline with per-step KV reads
    "deepseekv3-like": DecodeSpec(
        layers=8,
        kv_bytes_per_layer_per_token=256 * KIB,
        weight_bytes_per_layer=1 * GIB,
        prefill_tokens=1024,
        decode_steps=8,
        prefill_cost_us_per_layer=20_000,
        decode_cost_us_per_layer=2_000,
    ),
    # decode-serving snapshot at a documented scale:
    # weights 45.0 GB, KV 16.2 GB at 7200 tokens (8 x 281250 B/token/layer)
    "deepseekv3-serving": DecodeSpec(
        layers=8,
        kv_bytes_per_layer_per_token=281_250,
        weight_bytes_per_layer=5_625_000_000,
        prefill_tokens=7200,
        decode_steps=4,
        prefill_cost_us_per_layer=120_000,
        decode_cost_us_per_layer=2_000,
        include_prefill=False,
        kv_initial_tier="device",
        kv_decode_access="none",
    ),
    # same snapshot with the KV cache living in the remote pool
    "deepseekv3-serving-offload": DecodeSpec(
        layers=8,
        kv_bytes_per_layer_per_token=281_250,
        weight_bytes_per_layer=5_625_000_000,
        prefill_tokens=7200,
        decode_steps=4,
        prefill_cost_us_per_layer=120_000,
        decode_cost_us_per_layer=2_000,
        include_prefill=False,
        kv_initial_tier="remote",
        kv_decode_access="none",
    ),
    # long-sequence decode with scratch churn; fragments at ~95% occupancy
    "decode-frag": DecodeSpec(
        layers=4,
        kv_bytes_per_layer_per_token=12 * KIB,
        weight_bytes_per_layer=32 * MIB,
        prefill_tokens=1024,
        decode_steps=16,
        prefill_cost_us_per_layer=50_000,
        decode_cost_us_per_layer=3_000,
        include_prefill=False,
        kv_initial_tier="device",
        kv_decode_access="none",
        chain_bytes=4 * KIB,
        workspace_bytes=8 * MIB,
        workspace_alt_bytes=5 * MIB,
        state_bytes_per_step=64 * KIB,
    ),
}

MACHINE_PRESETS: dict[str, MachineModel] = {
    # pooled-memory node at the measured link speed (33.6 GB/s = 33600 B/us)
    "pooled-node-33.6": MachineModel(
        device_capacity_bytes=64 * GIB,
        remote_capacity_bytes=1024 * GIB,
        r2d_bandwidth_bytes_per_us=33_600.0,
        d2r_bandwidth_bytes_per_us=33_600.0,
        transfer_fixed_latency_us=10,
        compaction_bandwidth_bytes_per_us=100_000.0,
        reactive_orchestration_overhead_us=50,
    ),
    # capacities chosen so 7200 tokens fill the device and the remote pool
    # holds 1.73x the device headroom
    "serving-node": MachineModel(
        device_capacity_bytes=61_201_000_000,
        remote_capacity_bytes=28_030_000_000,
        r2d_bandwidth_bytes_per_us=33_600.0,
        d2r_bandwidth_bytes_per_us=33_600.0,
        transfer_fixed_latency_us=10,
        reactive_orchestration_overhead_us=50,
    ),
    # ~95% occupancy under decode-frag: weights+KV = 176 MiB of ~185.3 MiB
    "decode-frag": MachineModel(
        device_capacity_bytes=194_262_528,
        remote_capacity_bytes=8 * GIB,
        r2d_bandwidth_bytes_per_us=20_000.0,
        d2r_bandwidth_bytes_per_us=20_000.0,
        transfer_fixed_latency_us=10,
        compaction_bandwidth_bytes_per_us=2_000.0,
        reactive_orchestration_overhead_us=100,
    ),
    # tight device: forces the reactive baseline to shuttle every activation
    "reactive-calibration": MachineModel(
        device_capacity_bytes=5_400 * MIB,
        remote_capacity_bytes=1024 * GIB,
        r2d_bandwidth_bytes_per_us=33_600.0,
        d2r_bandwidth_bytes_per_us=33_600.0,
        transfer_fixed_latency_us=10,
        compaction_bandwidth_bytes_per_us=100_000.0,
        reactive_orchestration_overhead_us=2_000,
    ),
}


def generate_preset(name: str) -> GraphProgram:
    if name == "toy6":
        return build_latency_hiding_toy()
    spec = WORKLOAD_PRESETS.get(name)
    if spec is None:
        raise KeyError(f"unknown preset {name!r} (have {sorted(WORKLOAD_PRESETS) + ['toy6']})")
    if isinstance(spec, TrainSpec):
        return gen_transformer_train(spec)
    return gen_llm_decode(spec)
