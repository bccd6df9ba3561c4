"""Execution-order refinement: repositioning cache ops inside a topological order.

Each independent cache operator (one whose feasible range has more than one
slot) is evaluated at every feasible position against a static cost combining
exposed transfer latency and premature memory residency, then moved to the
argmin; ties break toward the latest position (smallest residency). Positions
are insertion indices into the order with the op removed.

The static estimate deliberately ignores DMA-channel contention: it assumes a
busy compute stream and an idle channel. The simulator is ground truth.

Per-kind evaluation (deadline = first dependency successor, anchor = latest
dependency predecessor):
  prefetch  exposure when the remote-to-device time exceeds the compute
            window to its deadline; residency charges arrival-to-use slack.
  store     exposure when its device-to-remote time exceeds the window to its
            detach; residency charges the distance from its anchor, because a
            late copy-out delays the release point.
  detach    it stalls the compute stream until the copy-out completes, so
            exposure compares the store's transfer time to the anchor -> p
            window; residency charges holding beyond that transfer's tail.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph_ir import (
    CACHE_KINDS,
    COMPUTE,
    PREFETCH,
    STORE,
    GraphError,
    GraphProgram,
    Schedule,
    is_topological,
    make_schedule,
)
from .machine_sim import D2R, R2D, MachineModel, SimReport, simulate


@dataclass(frozen=True)
class CostWeights:
    alpha: float = 1.0  # per us of exposed latency
    beta: float = 1e-9  # per byte-us of premature residency

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("weights must be non-negative and not both zero")


@dataclass(frozen=True)
class PositionEvaluation:
    cache_op_id: str
    position: int
    transfer_completion_us: int
    overlap_us: int
    exposed_us: int
    residency_byte_us: int
    cost: float


@dataclass(frozen=True)
class RefineRecord:
    op: str
    before_pos: int
    after_pos: int
    evaluation: PositionEvaluation


@dataclass(frozen=True)
class OracleResult:
    best_makespan_us: int
    best_makespan_order: tuple[str, ...]
    best_peak_bytes: int
    best_peak_order: tuple[str, ...]
    pareto_front: tuple[tuple[int, int], ...]  # (makespan_us, peak_bytes)
    orders_enumerated: int


def _rest_of(order, c: str) -> list[str]:
    rest = [o for o in order if o != c]
    if len(rest) == len(order):
        raise GraphError(f"op {c!r} not found in order")
    return rest


def feasible_positions(g: GraphProgram, order, c: str) -> range:
    """Insertion indices (into the order without c) preserving topological validity."""
    op = g.op_by_id.get(c)
    if op is None or op.kind not in CACHE_KINDS:
        raise GraphError(f"{c!r} is not a cache op of this graph")
    rest = _rest_of(order, c)
    pos = {o: i for i, o in enumerate(rest)}
    lp = max((pos[p] for p in g.predecessors[c]), default=-1)
    es = min((pos[s] for s in g.successors[c]), default=len(rest))
    return range(lp + 1, es + 1)


def _transfer_estimate(g: GraphProgram, m: MachineModel, c: str) -> int:
    op = g.op_by_id[c]
    nbytes = g.tensor_by_id[op.tensor_id].bytes
    if op.kind == PREFETCH:
        return m.transfer_us(nbytes, R2D)
    if op.kind == STORE:
        return m.transfer_us(nbytes, D2R)
    # detach synchronizes on its store's copy-out, if it has one
    for p in g.predecessors[c]:
        pred = g.op_by_id[p]
        if pred.kind == STORE and pred.tensor_id == op.tensor_id:
            return m.transfer_us(nbytes, D2R)
    return 0


def _evaluate(g, m, w, c, p, rest, prefix, rest_pos) -> PositionEvaluation:
    op = g.op_by_id[c]
    nbytes = g.tensor_by_id[op.tensor_id].bytes
    est = _transfer_estimate(g, m, c)
    anchor = max((rest_pos[x] for x in g.predecessors[c]), default=-1)
    deadline = min((rest_pos[x] for x in g.successors[c]), default=len(rest))
    from_anchor = prefix[p] - prefix[anchor + 1]
    to_deadline = prefix[deadline] - prefix[p]
    if op.kind == PREFETCH:
        overlap = to_deadline
        exposed = max(0, est - overlap)
        residency = nbytes * max(0, overlap - est)
    elif op.kind == STORE:
        overlap = to_deadline
        exposed = max(0, est - overlap)
        residency = nbytes * from_anchor
    else:  # detach
        overlap = from_anchor
        exposed = max(0, est - overlap)
        residency = nbytes * max(0, overlap - est)
    cost = w.alpha * exposed + w.beta * residency
    return PositionEvaluation(
        cache_op_id=c,
        position=p,
        transfer_completion_us=prefix[p] + est,
        overlap_us=overlap,
        exposed_us=exposed,
        residency_byte_us=residency,
        cost=cost,
    )


def _layout(g, order, c):
    rest = _rest_of(order, c)
    rest_pos = {o: i for i, o in enumerate(rest)}
    prefix = [0] * (len(rest) + 1)
    for i, o in enumerate(rest):
        node = g.op_by_id[o]
        prefix[i + 1] = prefix[i] + (node.cost_us if node.kind == COMPUTE else 0)
    return rest, rest_pos, prefix


def evaluate_position(g: GraphProgram, order, c: str, p: int, m: MachineModel, w: CostWeights) -> PositionEvaluation:
    """Static cost of placing cache op c at insertion index p."""
    rng = feasible_positions(g, order, c)
    if p not in rng:
        raise GraphError(f"position {p} is not feasible for {c!r} (feasible {rng.start}..{rng.stop - 1})")
    rest, rest_pos, prefix = _layout(g, order, c)
    return _evaluate(g, m, w, c, p, rest, prefix, rest_pos)


def refine_order_with_log(
    g: GraphProgram,
    order,
    m: MachineModel,
    w: CostWeights | None = None,
    max_passes: int = 4,
) -> tuple[Schedule, list[RefineRecord]]:
    """Greedy one-at-a-time repositioning of independent cache ops, smallest id first.

    A store/detach/prefetch chain starts out mutually adjacent, so one member
    bounds the feasible range of the next; the ascending-id pass is therefore
    iterated until no op moves (bounded by max_passes), which unlocks chains
    regardless of where the initial topological order parked them.
    """
    w = w if w is not None else CostWeights()
    order = list(order)
    if not is_topological(g, order):
        raise GraphError("input order is not a valid topological order of the graph")

    cache_ops = sorted(o.id for o in g.ops if o.kind in CACHE_KINDS)

    cur = order
    chosen: dict[str, PositionEvaluation] = {}
    for _ in range(max_passes):
        moved = False
        for c in cache_ops:
            rng = feasible_positions(g, cur, c)
            if len(rng) <= 1:
                continue  # fully constrained at its turn: not an independent op
            rest, rest_pos, prefix = _layout(g, cur, c)
            orig = cur.index(c)
            best = None
            orig_eval = None
            for p in rng:
                ev = _evaluate(g, m, w, c, p, rest, prefix, rest_pos)
                if p == orig:
                    orig_eval = ev
                if best is None or ev.cost <= best.cost:  # <= : ties go to the latest slot
                    best = ev
            assert best is not None and orig_eval is not None
            assert best.cost <= orig_eval.cost, "refinement must never pick a worse slot"
            if best.position != orig:
                moved = True
            cur = rest[: best.position] + [c] + rest[best.position :]
            chosen[c] = best
        if not moved:
            break
    log = [
        RefineRecord(op=c, before_pos=order.index(c), after_pos=cur.index(c), evaluation=chosen[c])
        for c in sorted(chosen)
    ]
    return make_schedule(g, cur), log


def refine_order(g: GraphProgram, order, m: MachineModel, w: CostWeights | None = None) -> Schedule:
    sched, _ = refine_order_with_log(g, order, m, w)
    return sched


def _linear_extensions(g: GraphProgram, max_orders: int):
    ids = sorted(o.id for o in g.ops)
    preds = {o: set(g.predecessors[o]) for o in ids}
    order: list[str] = []
    emitted = 0

    def rec():
        nonlocal emitted
        if len(order) == len(ids):
            emitted += 1
            if emitted > max_orders:
                raise GraphError(f"more than {max_orders} topological orders; graph too large")
            yield tuple(order)
            return
        placed = set(order)
        for cand in ids:
            if cand in placed or not preds[cand] <= placed:
                continue
            order.append(cand)
            yield from rec()
            order.pop()

    yield from rec()


def exhaustive_oracle(g: GraphProgram, m: MachineModel, max_orders: int = 100_000) -> OracleResult:
    """Simulate every topological order of a small graph (<= 10 ops).

    Returns the orders minimizing makespan and peak device bytes plus the
    (makespan, peak) Pareto front. Independent of refine_order by design.
    """
    if len(g.ops) > 10:
        raise GraphError(f"graph too large for the exhaustive oracle ({len(g.ops)} ops > 10)")
    best_mk: tuple[int, tuple[str, ...]] | None = None
    best_pk: tuple[int, tuple[str, ...]] | None = None
    points: dict[tuple[int, int], None] = {}
    count = 0
    for order in _linear_extensions(g, max_orders):
        count += 1
        report: SimReport = simulate(g, make_schedule(g, order), m)
        if report.oom is not None:
            continue
        mk, pk = report.makespan_us, report.peak_device_bytes
        points[(mk, pk)] = None
        if best_mk is None or mk < best_mk[0]:
            best_mk = (mk, order)
        if best_pk is None or pk < best_pk[0]:
            best_pk = (pk, order)
    if best_mk is None or best_pk is None:
        raise GraphError("no topological order of the graph completes without oom")
    pareto = [
        (mk, pk)
        for mk, pk in sorted(points)
        if not any(m2 <= mk and p2 <= pk and (m2, p2) != (mk, pk) for m2, p2 in points)
    ]
    return OracleResult(
        best_makespan_us=best_mk[0],
        best_makespan_order=best_mk[1],
        best_peak_bytes=best_pk[0],
        best_peak_order=best_pk[1],
        pareto_front=tuple(pareto),
        orders_enumerated=count,
    )
