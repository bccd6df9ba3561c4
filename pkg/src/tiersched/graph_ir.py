"""Computation-graph IR in which remote-cache operations are first-class nodes.

A graph is a set of tensor declarations plus operator nodes. Compute nodes
carry a cost in microseconds; Prefetch/Store/Detach nodes reference exactly
one tensor and model remote-to-device loads, device-to-remote copy-outs, and
device-residency release. Dependencies are the union of data edges (producer
to reader through a shared tensor) and explicit control edges.

Determinism rule used throughout the package: wherever several operators are
equally ready, the lexicographically smallest op id wins.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from functools import cached_property

TENSOR_KINDS = (
    "weight",
    "activation",
    "gradient",
    "optimizer_state",
    "kv_block",
    "workspace",
)
TIERS = ("device", "remote")

COMPUTE = "compute"
PREFETCH = "prefetch"
STORE = "store"
DETACH = "detach"
CACHE_KINDS = (PREFETCH, STORE, DETACH)
OP_KINDS = (COMPUTE,) + CACHE_KINDS

STREAM_COMPUTE = "COMPUTE"
STREAM_DMA_IN = "DMA_IN"
STREAM_DMA_OUT = "DMA_OUT"
STREAM_OF_KIND = {
    COMPUTE: STREAM_COMPUTE,
    PREFETCH: STREAM_DMA_IN,
    STORE: STREAM_DMA_OUT,
    DETACH: STREAM_COMPUTE,  # residency-release marker, zero duration
}


class GraphError(Exception):
    pass


class UnknownTensorError(GraphError):
    pass


class GraphValidationError(GraphError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(v.detail for v in self.violations[:5])
        more = "" if len(self.violations) <= 5 else f" (+{len(self.violations) - 5} more)"
        super().__init__(f"graph failed validation: {lines}{more}")


@dataclass(frozen=True)
class TensorDecl:
    """A tensor: the unit whose device/remote residency the cache ops manage.

    ``alias_of`` links an in-place-updated version to its storage root; alias
    versions consume no extra device memory.
    """

    id: str
    bytes: int
    kind: str
    initial_tier: str = "device"
    pinned: bool = False
    alias_of: str | None = None


@dataclass(frozen=True)
class OpNode:
    """One operator. Compute uses inputs/outputs/cost_us; cache ops use tensor_id."""

    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    cost_us: int = 0
    tensor_id: str | None = None

    def reads(self) -> tuple[str, ...]:
        """Tensor ids this op touches as a consumer/handler (not as producer)."""
        if self.kind == COMPUTE:
            return self.inputs
        return (self.tensor_id,) if self.tensor_id is not None else ()

    def is_transfer(self) -> bool:
        return self.kind in (PREFETCH, STORE)


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str
    ops: tuple[str, ...] = ()
    tensors: tuple[str, ...] = ()


@dataclass(frozen=True)
class GraphProgram:
    """Immutable operator DAG plus tensor declarations and control edges."""

    tensors: tuple[TensorDecl, ...]
    ops: tuple[OpNode, ...]
    control_edges: tuple[tuple[str, str], ...] = ()

    @cached_property
    def tensor_by_id(self) -> dict[str, TensorDecl]:
        return {t.id: t for t in self.tensors}

    @cached_property
    def op_by_id(self) -> dict[str, OpNode]:
        return {o.id: o for o in self.ops}

    @cached_property
    def producer_of(self) -> dict[str, str]:
        """tensor id -> producing op id (graph inputs are absent)."""
        out = {}
        for op in self.ops:
            for t in op.outputs:
                out.setdefault(t, op.id)
        return out

    @cached_property
    def readers_of(self) -> dict[str, tuple[str, ...]]:
        """tensor id -> op ids touching it (inputs or cache target), id-sorted."""
        acc: dict[str, list[str]] = {t.id: [] for t in self.tensors}
        for op in self.ops:
            for t in op.reads():
                if t in acc:
                    acc[t].append(op.id)
        return {t: tuple(sorted(ids)) for t, ids in acc.items()}

    @cached_property
    def dependency_edges(self) -> tuple[tuple[str, str], ...]:
        """Data edges (producer -> reader) plus control edges, deduplicated."""
        seen = set()
        edges = []
        for op in self.ops:
            for t in op.reads():
                prod = self.producer_of.get(t)
                if prod is None or prod == op.id:
                    continue
                e = (prod, op.id)
                if e not in seen:
                    seen.add(e)
                    edges.append(e)
        for e in self.control_edges:
            e = (e[0], e[1])
            if e not in seen:
                seen.add(e)
                edges.append(e)
        return tuple(edges)

    @cached_property
    def predecessors(self) -> dict[str, tuple[str, ...]]:
        acc: dict[str, list[str]] = {o.id: [] for o in self.ops}
        for u, v in self.dependency_edges:
            if v in acc and u in self.op_by_id:
                acc[v].append(u)
        return {k: tuple(v) for k, v in acc.items()}

    @cached_property
    def successors(self) -> dict[str, tuple[str, ...]]:
        acc: dict[str, list[str]] = {o.id: [] for o in self.ops}
        for u, v in self.dependency_edges:
            if u in acc and v in self.op_by_id:
                acc[u].append(v)
        return {k: tuple(v) for k, v in acc.items()}

    def alias_root(self, tensor_id: str) -> str:
        """Follow alias links to the storage root of a tensor."""
        seen = set()
        t = tensor_id
        while True:
            decl = self.tensor_by_id[t]
            if decl.alias_of is None or decl.alias_of not in self.tensor_by_id:
                return t
            if t in seen:  # alias cycle: validate() reports it, stop here
                return t
            seen.add(t)
            t = decl.alias_of

    @cached_property
    def alias_families(self) -> dict[str, tuple[str, ...]]:
        """storage root -> all tensor ids sharing its bytes (root included)."""
        fams: dict[str, list[str]] = {}
        for t in self.tensors:
            fams.setdefault(self.alias_root(t.id), []).append(t.id)
        return {r: tuple(sorted(m)) for r, m in fams.items()}


@dataclass(frozen=True)
class Schedule:
    """A total order over op ids plus the per-op stream assignment."""

    order: tuple[str, ...]
    streams: dict[str, str] = field(default_factory=dict)

    @cached_property
    def position(self) -> dict[str, int]:
        return {op: i for i, op in enumerate(self.order)}


def streams_for(g: GraphProgram, order) -> dict[str, str]:
    return {op: STREAM_OF_KIND[g.op_by_id[op].kind] for op in order}


def make_schedule(g: GraphProgram, order) -> Schedule:
    return Schedule(order=tuple(order), streams=streams_for(g, order))


def _find_cycle(op_ids, edges) -> tuple[str, ...]:
    """Return the op ids of one dependency cycle, () if acyclic (iterative DFS)."""
    succ: dict[str, list[str]] = {o: [] for o in op_ids}
    for u, v in edges:
        if u in succ and v in succ:
            succ[u].append(v)
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {o: WHITE for o in op_ids}
    parent: dict[str, str] = {}
    for root in op_ids:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(succ[root]))]
        color[root] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == WHITE:
                    color[nxt] = GRAY
                    parent[nxt] = node
                    stack.append((nxt, iter(succ[nxt])))
                    advanced = True
                    break
                if color[nxt] == GRAY:
                    cycle = [nxt, node]
                    cur = node
                    while cur != nxt:
                        cur = parent[cur]
                        cycle.append(cur)
                    cycle.pop()
                    cycle.reverse()
                    return tuple(cycle)
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return ()


def validate(g: GraphProgram) -> list[Violation]:
    """Check graph well-formedness. Violations are data, not exceptions."""
    out: list[Violation] = []
    seen_t: set[str] = set()
    for t in g.tensors:
        if t.id in seen_t:
            out.append(Violation("duplicate_tensor_id", f"tensor id {t.id!r} declared twice", tensors=(t.id,)))
        seen_t.add(t.id)
        if t.bytes <= 0:
            out.append(Violation("nonpositive_bytes", f"tensor {t.id!r} has bytes={t.bytes}", tensors=(t.id,)))
        if t.kind not in TENSOR_KINDS:
            out.append(Violation("bad_tensor_kind", f"tensor {t.id!r} has kind {t.kind!r}", tensors=(t.id,)))
        if t.initial_tier not in TIERS:
            out.append(Violation("bad_tier", f"tensor {t.id!r} has initial_tier {t.initial_tier!r}", tensors=(t.id,)))
        if t.pinned and t.initial_tier != "device":
            out.append(Violation("pinned_remote", f"pinned tensor {t.id!r} must start on device", tensors=(t.id,)))
        if t.alias_of is not None and t.alias_of not in {d.id for d in g.tensors}:
            out.append(Violation("dangling_alias", f"tensor {t.id!r} aliases unknown {t.alias_of!r}", tensors=(t.id,)))

    tids = seen_t
    seen_o: set[str] = set()
    producers: dict[str, list[str]] = {}
    for op in g.ops:
        if op.id in seen_o:
            out.append(Violation("duplicate_op_id", f"op id {op.id!r} declared twice", ops=(op.id,)))
        seen_o.add(op.id)
        if op.kind not in OP_KINDS:
            out.append(Violation("bad_op_kind", f"op {op.id!r} has kind {op.kind!r}", ops=(op.id,)))
            continue
        for t in op.inputs + op.outputs:
            if t not in tids:
                out.append(Violation("dangling_tensor", f"op {op.id!r} references unknown tensor {t!r}", ops=(op.id,), tensors=(t,)))
        if op.kind == COMPUTE:
            if op.cost_us < 0:
                out.append(Violation("negative_cost", f"op {op.id!r} has cost_us={op.cost_us}", ops=(op.id,)))
            if op.tensor_id is not None:
                out.append(Violation("compute_with_tensor_id", f"compute op {op.id!r} carries tensor_id", ops=(op.id,)))
            for t in op.outputs:
                producers.setdefault(t, []).append(op.id)
        else:
            if op.tensor_id is None:
                out.append(Violation("cache_without_tensor", f"cache op {op.id!r} names no tensor", ops=(op.id,)))
            elif op.tensor_id not in tids:
                out.append(Violation("dangling_tensor", f"op {op.id!r} references unknown tensor {op.tensor_id!r}", ops=(op.id,), tensors=(op.tensor_id,)))
            if op.inputs or op.outputs:
                out.append(Violation("cache_with_io", f"cache op {op.id!r} must not list inputs/outputs", ops=(op.id,)))

    for t, prods in producers.items():
        if len(prods) > 1:
            out.append(Violation("multi_producer", f"tensor {t!r} produced by {sorted(prods)}", ops=tuple(sorted(prods)), tensors=(t,)))

    for u, v in g.control_edges:
        for e in (u, v):
            if e not in seen_o:
                out.append(Violation("dangling_control_edge", f"control edge ({u!r}, {v!r}) names unknown op {e!r}", ops=(e,)))
        if u == v:
            out.append(Violation("self_edge", f"control edge ({u!r}, {v!r}) is a self-loop", ops=(u,)))

    if not any(v.code.startswith(("duplicate", "dangling", "self")) for v in out):
        cycle = _find_cycle([o.id for o in g.ops], g.dependency_edges)
        if cycle:
            out.append(Violation("cycle", f"dependency cycle through {list(cycle)}", ops=cycle))
    return out


def topo_order(g: GraphProgram) -> Schedule:
    """Deterministic topological order: among ready ops the smallest id first."""
    violations = validate(g)
    if violations:
        raise GraphValidationError(violations)
    indeg = {o.id: 0 for o in g.ops}
    for _, v in g.dependency_edges:
        indeg[v] += 1
    ready = [o for o, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        op = heapq.heappop(ready)
        order.append(op)
        for nxt in g.successors[op]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) != len(g.ops):  # unreachable after validate, kept as a guard
        raise GraphValidationError([Violation("cycle", "cyclic graph reached topo_order")])
    return make_schedule(g, order)


def consumers(g: GraphProgram, tensor_id: str) -> list[str]:
    """All ops reading tensor_id (cache ops count as readers of their target), id-sorted."""
    if tensor_id not in g.tensor_by_id:
        raise UnknownTensorError(f"unknown tensor {tensor_id!r}")
    return list(g.readers_of[tensor_id])


def is_topological(g: GraphProgram, order) -> bool:
    """Independent edge-direction check: every dependency edge points forward."""
    pos = {op: i for i, op in enumerate(order)}
    if len(pos) != len(g.ops) or set(pos) != {o.id for o in g.ops}:
        return False
    return all(pos[u] < pos[v] for u, v in g.dependency_edges)


def reachability(g: GraphProgram) -> dict[str, int]:
    """op id -> bitmask of reachable op indices (op itself included).

    Indices follow the id-sorted op list; intended for safety queries on
    moderate graphs.
    """
    ids = sorted(o.id for o in g.ops)
    idx = {op: i for i, op in enumerate(ids)}
    sched = topo_order(g)
    reach = {op: 1 << idx[op] for op in ids}
    for op in reversed(sched.order):
        mask = reach[op]
        for nxt in g.successors[op]:
            mask |= reach[nxt]
        reach[op] = mask
    return reach


def op_index(g: GraphProgram) -> dict[str, int]:
    return {op: i for i, op in enumerate(sorted(o.id for o in g.ops))}


# --- JSON interchange -------------------------------------------------------
# Top-level keys: tensors, ops, control_edges. Unknown keys are rejected so
# schema drift fails loudly instead of being silently ignored.

_TENSOR_FIELDS = {"id", "bytes", "kind", "initial_tier", "pinned", "alias_of"}
_COMPUTE_FIELDS = {"id", "kind", "inputs", "outputs", "cost_us"}
_CACHE_FIELDS = {"id", "kind", "tensor_id"}


def graph_to_dict(g: GraphProgram) -> dict:
    tensors = []
    for t in g.tensors:
        d = {"id": t.id, "bytes": t.bytes, "kind": t.kind, "initial_tier": t.initial_tier, "pinned": t.pinned}
        if t.alias_of is not None:
            d["alias_of"] = t.alias_of
        tensors.append(d)
    ops = []
    for op in g.ops:
        if op.kind == COMPUTE:
            ops.append({"id": op.id, "kind": op.kind, "inputs": list(op.inputs), "outputs": list(op.outputs), "cost_us": op.cost_us})
        else:
            ops.append({"id": op.id, "kind": op.kind, "tensor_id": op.tensor_id})
    return {"tensors": tensors, "ops": ops, "control_edges": [list(e) for e in g.control_edges]}


def graph_to_json(g: GraphProgram, indent: int | None = 2) -> str:
    return json.dumps(graph_to_dict(g), indent=indent, sort_keys=False)


def _reject_unknown(d: dict, allowed: set, what: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown {what} key(s): {sorted(unknown)}")


def graph_from_dict(d: dict) -> GraphProgram:
    _reject_unknown(d, {"tensors", "ops", "control_edges"}, "graph")
    tensors = []
    for td in d.get("tensors", []):
        _reject_unknown(td, _TENSOR_FIELDS, "tensor")
        tensors.append(
            TensorDecl(
                id=str(td["id"]),
                bytes=int(td["bytes"]),
                kind=str(td["kind"]),
                initial_tier=str(td.get("initial_tier", "device")),
                pinned=bool(td.get("pinned", False)),
                alias_of=td.get("alias_of"),
            )
        )
    ops = []
    for od in d.get("ops", []):
        kind = str(od.get("kind", ""))
        if kind == COMPUTE:
            _reject_unknown(od, _COMPUTE_FIELDS, "op")
            ops.append(
                OpNode(
                    id=str(od["id"]),
                    kind=COMPUTE,
                    inputs=tuple(str(x) for x in od.get("inputs", [])),
                    outputs=tuple(str(x) for x in od.get("outputs", [])),
                    cost_us=int(od.get("cost_us", 0)),
                )
            )
        else:
            _reject_unknown(od, _CACHE_FIELDS, "op")
            ops.append(OpNode(id=str(od["id"]), kind=kind, tensor_id=str(od["tensor_id"])))
    edges = tuple((str(a), str(b)) for a, b in d.get("control_edges", []))
    return GraphProgram(tensors=tuple(tensors), ops=tuple(ops), control_edges=edges)


def graph_from_json(text: str) -> GraphProgram:
    return graph_from_dict(json.loads(text))


def schedule_to_dict(s: Schedule) -> dict:
    return {"order": list(s.order), "streams": dict(s.streams)}


def schedule_from_dict(d: dict) -> Schedule:
    _reject_unknown(d, {"order", "streams"}, "schedule")
    return Schedule(order=tuple(d["order"]), streams=dict(d.get("streams", {})))
