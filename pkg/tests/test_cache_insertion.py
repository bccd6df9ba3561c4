import pytest

from tiersched import (
    CandidatePolicy,
    GraphProgram,
    MachineModel,
    OffloadPlan,
    PlanEntry,
    PlanError,
    check_residency_safety,
    compute_lifetimes,
    insert_cache_ops,
    select_candidates,
    simulate,
    topo_order,
    validate,
)
from tiersched.workloads import DecodeSpec, TrainSpec, gen_llm_decode, gen_random_dag, gen_transformer_train

from conftest import cache, compute, tensor

MIB = 1 << 20


def _machine(**kw):
    base = dict(
        device_capacity_bytes=1 << 40,
        remote_capacity_bytes=1 << 40,
        r2d_bandwidth_bytes_per_us=33_600.0,
        d2r_bandwidth_bytes_per_us=33_600.0,
    )
    base.update(kw)
    return MachineModel(**base)


def _train4():
    return gen_transformer_train(TrainSpec(4, 64 * MIB, 8 * MIB, 8 * MIB, 5000, 5000, 1000))


def test_empty_plan_is_identity():
    g = _train4()
    s = topo_order(g)
    out = insert_cache_ops(g, s, OffloadPlan(entries=()))
    assert out == g


def _fwd_bwd4():
    # four forward ops on a hidden chain, each stashing an activation that only
    # its backward op reads: the canonical offload-across-the-boundary shape
    tensors = [tensor(f"h{i}", 512) for i in range(9)]
    tensors += [tensor(f"act{i}", 64 * MIB) for i in range(4)]
    ops = []
    for i in range(4):
        inputs = (f"h{i - 1}",) if i > 0 else ()
        ops.append(compute(f"f{i}", inputs, (f"h{i}", f"act{i}"), 5000))
    for i in range(3, -1, -1):
        ops.append(compute(f"g{7 - i}", (f"h{3 + (3 - i)}", f"act{i}"), (f"h{4 + (3 - i)}",), 5000))
    return GraphProgram(tensors=tuple(tensors), ops=tuple(ops))


def test_single_activation_adds_three_nodes_three_edges():
    g = _fwd_bwd4()
    s = topo_order(g)
    assert validate(g) == []
    # offload act0 across the forward/backward boundary
    reload_pos = s.position["g7"]
    plan = OffloadPlan(entries=(PlanEntry("act0", 0, reload_pos),))
    out = insert_cache_ops(g, s, plan)
    assert len(out.ops) == len(g.ops) + 3
    assert len(out.control_edges) == len(g.control_edges) + 3
    kinds = sorted(o.kind for o in out.ops[len(g.ops):])
    assert kinds == ["detach", "prefetch", "store"]
    assert validate(out) == []
    assert check_residency_safety(out) == []


def test_consumer_anchored_eviction_adds_anchor_edge():
    # when the eviction anchor is a consumer (not the producer) one extra
    # ordering edge is required
    g = _train4()
    s = topo_order(g)
    plan = OffloadPlan(entries=(PlanEntry("act_00", 1, s.position["bwd_00"]),))
    out = insert_cache_ops(g, s, plan)
    assert len(out.ops) == len(g.ops) + 3
    assert len(out.control_edges) == len(g.control_edges) + 4
    assert ("fwd_01", "act_00__c0_store") in out.control_edges
    assert check_residency_safety(out) == []


def test_kv_decode_prefetch_bound_to_first_decode_attention():
    spec = DecodeSpec(
        layers=4,
        kv_bytes_per_layer_per_token=64 * 1024,
        weight_bytes_per_layer=32 * MIB,
        prefill_tokens=64,
        decode_steps=3,
        prefill_cost_us_per_layer=60_000,
        decode_cost_us_per_layer=2_000,
    )
    g = gen_llm_decode(spec)
    s = topo_order(g)
    m = _machine()
    plan = select_candidates(g, s, compute_lifetimes(g, s), m, CandidatePolicy(kinds_enabled=frozenset({"kv_block"}), min_tensor_bytes=1))
    assert sorted(e.tensor_id for e in plan.entries) == [f"kv_{i:02d}" for i in range(4)]
    out = insert_cache_ops(g, s, plan)
    prefetches = [o for o in out.ops if o.kind == "prefetch"]
    assert len(prefetches) == 4
    for p in prefetches:
        layer = p.tensor_id[-2:]
        succs = set(out.successors[p.id])
        assert f"attn_000_{layer}" in succs  # bound before the first decode read
    assert check_residency_safety(out) == []


def test_original_nodes_data_edges_tensors_preserved():
    g = _train4()
    s = topo_order(g)
    m = _machine()
    plan = select_candidates(g, s, compute_lifetimes(g, s), m, CandidatePolicy(min_tensor_bytes=1, min_gap_ratio=1.0))
    assert plan.entries
    out = insert_cache_ops(g, s, plan)
    assert out.tensors == g.tensors
    by_id = out.op_by_id
    for op in g.ops:
        assert by_id[op.id] == op  # untouched, not re-costed
    data_edges = {(u, v) for u, v in g.dependency_edges if (u, v) not in g.control_edges}
    out_edges = set(out.dependency_edges)
    assert data_edges <= out_edges


def test_hazard_store_detach_without_prefetch():
    tensors = [tensor("x"), tensor("t0"), tensor("t1")]
    ops = [
        compute("a", (), ("t0", "x"), 10),
        cache("s", "store", "x"),
        cache("d", "detach", "x"),
        compute("z", ("t0", "x"), ("t1",), 10),
    ]
    g = GraphProgram(
        tensors=tuple(tensors),
        ops=tuple(ops),
        control_edges=(("s", "d"), ("d", "z")),
    )
    hazards = check_residency_safety(g)
    assert len(hazards) == 1
    assert hazards[0].kind == "use_after_evict"
    assert hazards[0].consumer == "z"
    assert hazards[0].tensor_id == "x"


def test_hazard_on_unordered_consumer():
    # consumer not ordered against the detach at all: some schedule breaks it
    tensors = [tensor("x"), tensor("t0"), tensor("t1")]
    ops = [
        compute("a", (), ("t0", "x"), 10),
        cache("s", "store", "x"),
        cache("d", "detach", "x"),
        compute("z", ("t0", "x"), ("t1",), 10),
    ]
    g = GraphProgram(tensors=tuple(tensors), ops=tuple(ops), control_edges=(("s", "d"),))
    assert [h.consumer for h in check_residency_safety(g)] == ["z"]


def test_sandwich_is_safe():
    tensors = [tensor("x"), tensor("t0"), tensor("t1")]
    ops = [
        compute("a", (), ("t0", "x"), 10),
        cache("s", "store", "x"),
        cache("d", "detach", "x"),
        cache("p", "prefetch", "x"),
        compute("z", ("t0", "x"), ("t1",), 10),
    ]
    g = GraphProgram(
        tensors=tuple(tensors),
        ops=tuple(ops),
        control_edges=(("s", "d"), ("d", "p"), ("p", "z")),
    )
    assert check_residency_safety(g) == []


def test_mutation_dropping_a_prefetch_flags_its_consumers():
    g = _train4()
    s = topo_order(g)
    m = _machine()
    plan = select_candidates(g, s, compute_lifetimes(g, s), m, CandidatePolicy(min_tensor_bytes=1, min_gap_ratio=1.0))
    out = insert_cache_ops(g, s, plan)
    assert check_residency_safety(out) == []
    prefetches = [o for o in out.ops if o.kind == "prefetch"]
    assert prefetches
    out_sched = topo_order(out)
    for victim in prefetches:
        t = victim.tensor_id
        mutated = GraphProgram(
            tensors=out.tensors,
            ops=tuple(o for o in out.ops if o.id != victim.id),
            control_edges=tuple(e for e in out.control_edges if victim.id not in e),
        )
        hazards = check_residency_safety(mutated)
        flagged = {h.consumer for h in hazards}
        # exactly the dropped tensor's consumers past its release point
        detach_pos = out_sched.position[f"{t}__c1_detach"]
        expected = {
            o.id
            for o in out.ops
            if o.kind == "compute" and t in o.inputs and out_sched.position[o.id] > detach_pos
        }
        assert flagged == expected
        assert expected  # every offloaded tensor has a reloading consumer here
        assert all(h.tensor_id == t and h.kind == "use_after_evict" for h in hazards)


def test_remote_initial_weights_get_prefetch_without_store():
    tensors = [tensor("w", 8 * MIB, kind="weight", tier="remote"), tensor("t0", 512), tensor("t1", 512)]
    ops = [compute("a", (), ("t0",), 10), compute("b", ("t0", "w"), ("t1",), 10)]
    g = GraphProgram(tensors=tuple(tensors), ops=tuple(ops))
    assert [h.kind for h in check_residency_safety(g)] == ["use_before_load"]
    out = insert_cache_ops(g, topo_order(g), OffloadPlan(entries=()))
    kinds = [o.kind for o in out.ops[len(g.ops):]]
    assert kinds == ["prefetch"]
    assert check_residency_safety(out) == []
    r = simulate(out, topo_order(out), _machine())
    assert r.oom is None


def test_plan_validation_errors():
    g = _train4()
    s = topo_order(g)
    with pytest.raises(PlanError, match="unknown tensor"):
        insert_cache_ops(g, s, OffloadPlan(entries=(PlanEntry("nope", 0, 3),)))
    with pytest.raises(PlanError, match="outside the schedule"):
        insert_cache_ops(g, s, OffloadPlan(entries=(PlanEntry("act_00", 1, len(s.order) + 1),)))
    with pytest.raises(PlanError, match="evict_after_pos >= reload_before_pos"):
        insert_cache_ops(g, s, OffloadPlan(entries=(PlanEntry("act_00", 5, 5),)))
    with pytest.raises(PlanError, match="inside its eviction window"):
        insert_cache_ops(g, s, OffloadPlan(entries=(PlanEntry("act_00", 0, s.position["bwd_00"]),)))
    with pytest.raises(PlanError, match="must name a consumer"):
        insert_cache_ops(g, s, OffloadPlan(entries=(PlanEntry("act_00", 1, s.position["bwd_01"]),)))
    with pytest.raises(PlanError, match="overlapping"):
        insert_cache_ops(
            g,
            s,
            OffloadPlan(
                entries=(
                    PlanEntry("act_00", 1, s.position["bwd_00"]),
                    PlanEntry("act_00", 2, s.position["bwd_00"]),
                )
            ),
        )


def test_pipeline_output_always_safe_over_random_graphs():
    for seed in range(25):
        g = gen_random_dag(seed)
        assert validate(g) == []
        assert check_residency_safety(g) == []


def test_round_trip_infinite_machine_preserves_makespan():
    # with unbounded capacity and near-infinite bandwidth the cache ops
    # degenerate to zero cost: same makespan as the original graph
    m = _machine(r2d_bandwidth_bytes_per_us=1e12, d2r_bandwidth_bytes_per_us=1e12)
    for seed in range(12):
        g = gen_random_dag(seed)
        from dataclasses import replace as d_replace

        stripped = GraphProgram(
            tensors=tuple(d_replace(t, initial_tier="device") for t in g.tensors),
            ops=tuple(o for o in g.ops if o.kind == "compute"),
            control_edges=tuple(e for e in g.control_edges if all(not x.endswith(("_store", "_detach", "_prefetch")) for x in e)),
        )
        base = simulate(stripped, topo_order(stripped), m)
        full = simulate(g, topo_order(g), m)
        assert full.oom is None and base.oom is None
        assert abs(full.makespan_us - base.makespan_us) <= 1
