"""Materializes an offload plan into explicit Store/Detach/Prefetch nodes.

For each plan entry on tensor t the pass adds a Store(t) ordered after the
eviction anchor, a Detach(t) after the Store (memory is released only once
the copy-out completed), and a Prefetch(t) control-edged before the reloading
consumer. Remote-initial inputs that are read get a Prefetch even without a
Store (their remote copy is authoritative).

The safety checker flags consumers that some valid execution order could run
after a Detach with no reload in between, and reads of remote-initial tensors
no Prefetch is forced to precede.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph_ir import (
    DETACH,
    PREFETCH,
    STORE,
    GraphError,
    GraphProgram,
    GraphValidationError,
    OpNode,
    Schedule,
    op_index,
    reachability,
    validate,
)
from .memory_analysis import OffloadPlan


class PlanError(GraphError):
    pass


@dataclass(frozen=True)
class Hazard:
    kind: str  # "use_after_evict" | "use_before_load"
    tensor_id: str
    consumer: str
    detach: str | None = None

    def describe(self) -> str:
        if self.kind == "use_after_evict":
            return f"op {self.consumer!r} may read {self.tensor_id!r} after {self.detach!r} with no reload in between"
        return f"op {self.consumer!r} reads remote-initial {self.tensor_id!r} with no prefetch forced before it"


def _access_positions(g: GraphProgram, s: Schedule, tensor_id: str) -> list[int]:
    pos = s.position
    out = {pos[o] for o in g.readers_of[tensor_id] if o in pos}
    prod = g.producer_of.get(tensor_id)
    if prod is not None and prod in pos:
        out.add(pos[prod])
    return sorted(out)


def _fresh_id(base: str, taken: set[str]) -> str:
    if base not in taken:
        taken.add(base)
        return base
    k = 2
    while f"{base}__{k}" in taken:
        k += 1
    taken.add(f"{base}__{k}")
    return f"{base}__{k}"


def insert_cache_ops(g: GraphProgram, s: Schedule, plan: OffloadPlan) -> GraphProgram:
    """Rewrite g per plan. Original nodes, data edges and tensors are untouched."""
    n = len(s.order)
    if set(s.order) != {o.id for o in g.ops}:
        raise PlanError("schedule does not match graph")

    per_tensor: dict[str, list] = {}
    for e in plan.entries:
        decl = g.tensor_by_id.get(e.tensor_id)
        if decl is None:
            raise PlanError(f"plan references unknown tensor {e.tensor_id!r}")
        if decl.initial_tier == "remote" and decl.id not in g.producer_of:
            raise PlanError(f"tensor {e.tensor_id!r} never resides on device; nothing to evict")
        if not (-1 <= e.evict_after_pos < n) or not (0 <= e.reload_before_pos <= n):
            raise PlanError(f"entry for {e.tensor_id!r} references positions outside the schedule")
        if e.evict_after_pos >= e.reload_before_pos:
            raise PlanError(f"entry for {e.tensor_id!r} has evict_after_pos >= reload_before_pos")
        per_tensor.setdefault(e.tensor_id, []).append(e)

    for t, entries in per_tensor.items():
        entries.sort(key=lambda e: e.evict_after_pos)
        accesses = _access_positions(g, s, t)
        prev_reload = -1
        for e in entries:
            if e.evict_after_pos + 1 < prev_reload:
                raise PlanError(f"overlapping entries for tensor {t!r}")
            inside = [a for a in accesses if e.evict_after_pos < a < e.reload_before_pos]
            if inside:
                raise PlanError(
                    f"tensor {t!r} is accessed at position {inside[0]} inside its eviction window"
                )
            if e.reload_before_pos < n:
                reload_op = g.op_by_id[s.order[e.reload_before_pos]]
                if t not in reload_op.reads():
                    raise PlanError(
                        f"reload_before_pos for {t!r} must name a consumer, got {reload_op.id!r}"
                    )
            prev_reload = e.reload_before_pos

    taken = {o.id for o in g.ops}
    new_ops: list[OpNode] = []
    new_edges: list[tuple[str, str]] = []
    reach = reachability(g)
    ridx = op_index(g)

    def reaches(a: str, b: str) -> bool:
        return bool(reach[a] >> ridx[b] & 1)

    # the c0/c1/c2 digit orders refinement: the store settles first (pulled to
    # its eviction anchor), then the detach against it, then the prefetch
    for t in sorted(per_tensor):
        producer = g.producer_of.get(t)
        accesses = _access_positions(g, s, t)
        for e in per_tensor[t]:
            store_id = _fresh_id(f"{t}__c0_store", taken)
            detach_id = _fresh_id(f"{t}__c1_detach", taken)
            new_ops.append(OpNode(id=store_id, kind=STORE, tensor_id=t))
            new_ops.append(OpNode(id=detach_id, kind=DETACH, tensor_id=t))
            new_edges.append((store_id, detach_id))

            if e.evict_after_pos >= 0:
                anchor = s.order[e.evict_after_pos]
                if anchor != producer:  # the producer->store data edge already orders it
                    new_edges.append((anchor, store_id))
            else:
                anchor = None
            for a in accesses:
                if a > e.evict_after_pos:
                    break
                op_a = s.order[a]
                if op_a != producer and op_a != anchor:
                    new_edges.append((op_a, detach_id))

            if e.reload_before_pos < n:
                prefetch_id = _fresh_id(f"{t}__c2_prefetch", taken)
                new_ops.append(OpNode(id=prefetch_id, kind=PREFETCH, tensor_id=t))
                new_edges.append((detach_id, prefetch_id))
                reload_op = s.order[e.reload_before_pos]
                new_edges.append((prefetch_id, reload_op))
                # residency persists for later consumers; force it only where the
                # graph does not already order them after the reloading consumer
                for a in accesses:
                    if a <= e.reload_before_pos:
                        continue
                    op_a = s.order[a]
                    if not reaches(reload_op, op_a):
                        new_edges.append((prefetch_id, op_a))

    # remote-initial inputs that are read need a load before first use
    prefetched = {o.tensor_id for o in g.ops if o.kind == PREFETCH}
    prefetched.update(o.tensor_id for o in new_ops if o.kind == PREFETCH)
    for decl in sorted(g.tensors, key=lambda d: d.id):
        if decl.initial_tier != "remote" or decl.id in g.producer_of:
            continue
        readers = [o for o in g.readers_of[decl.id] if g.op_by_id[o].kind not in (PREFETCH, DETACH)]
        if not readers or decl.id in prefetched:
            continue
        readers.sort(key=lambda o: s.position[o])
        first = readers[0]
        prefetch_id = _fresh_id(f"{decl.id}__c2_prefetch", taken)
        new_ops.append(OpNode(id=prefetch_id, kind=PREFETCH, tensor_id=decl.id))
        new_edges.append((prefetch_id, first))
        for o in readers[1:]:
            if not reaches(first, o):
                new_edges.append((prefetch_id, o))

    if not new_ops and not new_edges:
        return g
    out = GraphProgram(
        tensors=g.tensors,
        ops=g.ops + tuple(new_ops),
        control_edges=g.control_edges + tuple(new_edges),
    )
    violations = validate(out)
    if violations:  # defensive: a valid plan can never produce these
        raise GraphValidationError(violations)
    return out


def check_residency_safety(g: GraphProgram) -> list[Hazard]:
    """Empty result means every topological order of g is residency-safe."""
    violations = validate(g)
    if violations:
        raise GraphValidationError(violations)
    reach = reachability(g)
    ridx = op_index(g)

    def reaches(a: str, b: str) -> bool:
        return bool(reach[a] >> ridx[b] & 1)

    prefetches: dict[str, list[str]] = {}
    detaches: dict[str, list[str]] = {}
    for op in g.ops:
        if op.kind == PREFETCH:
            prefetches.setdefault(op.tensor_id, []).append(op.id)
        elif op.kind == DETACH:
            detaches.setdefault(op.tensor_id, []).append(op.id)

    hazards: list[Hazard] = []
    for t in sorted(detaches):
        at_risk = [
            o for o in g.readers_of.get(t, ())
            if g.op_by_id[o].kind not in (PREFETCH, DETACH)
        ]
        p_t = prefetches.get(t, ())
        for d in sorted(detaches[t]):
            reloads = [p for p in p_t if reaches(d, p)]
            for v in at_risk:
                if reaches(v, d):
                    continue  # v always runs before the release
                if any(reaches(p, v) for p in reloads):
                    continue  # a reload is forced between d and v
                hazards.append(Hazard("use_after_evict", t, v, d))

    for decl in sorted(g.tensors, key=lambda d: d.id):
        if decl.initial_tier != "remote" or decl.id in g.producer_of:
            continue
        p_t = prefetches.get(decl.id, ())
        for v in g.readers_of[decl.id]:
            if g.op_by_id[v].kind in (PREFETCH, DETACH):
                continue
            if not any(reaches(p, v) for p in p_t):
                hazards.append(Hazard("use_before_load", decl.id, v, None))
    return hazards
