"""Tensor lifetimes and offload-candidate selection.

Lifetimes are measured in schedule positions. A tensor's accesses are its
producer position plus every reader position (cache ops count as readers of
their target). Idle windows are the maximal position runs with no access.

Candidate selection picks, per tensor, the single largest idle window and
keeps it only when the window's statically estimated wall time beats the
round-trip transfer estimate by a configurable factor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .graph_ir import COMPUTE, GraphProgram, Schedule, TensorDecl, UnknownTensorError
from .machine_sim import D2R, R2D, MachineModel


@dataclass(frozen=True)
class Lifetime:
    tensor_id: str
    def_pos: int
    last_use_pos: int
    idle_windows: tuple[tuple[int, int], ...]  # inclusive position intervals
    accesses: tuple[int, ...] = ()

    def largest_idle_window(self) -> tuple[int, int] | None:
        """Widest window; ties go to the earliest (stable eviction anchor)."""
        best = None
        best_len = 0
        for w in self.idle_windows:
            ln = w[1] - w[0] + 1
            if ln > best_len:
                best, best_len = w, ln
        return best


@dataclass(frozen=True)
class CandidatePolicy:
    """Thresholds excluding short-lived / fine-grained tensors from offload."""

    min_gap_ratio: float = 2.0
    min_tensor_bytes: int = 1 << 20
    kinds_enabled: frozenset[str] = frozenset({"activation", "optimizer_state", "kv_block"})

    def __post_init__(self):
        if self.min_gap_ratio < 1:
            raise ValueError("min_gap_ratio must be >= 1")
        if self.min_tensor_bytes < 0:
            raise ValueError("min_tensor_bytes must be >= 0")
        object.__setattr__(self, "kinds_enabled", frozenset(self.kinds_enabled))


@dataclass(frozen=True)
class PlanEntry:
    """One eviction cycle: evict after a position, reload before another.

    evict_after_pos is -1 for graph inputs idle from the start;
    reload_before_pos equals len(order) for terminal evictions (no later
    consumer, so no reload).
    """

    tensor_id: str
    evict_after_pos: int
    reload_before_pos: int


@dataclass(frozen=True)
class OffloadPlan:
    entries: tuple[PlanEntry, ...]
    policy: CandidatePolicy = field(default_factory=CandidatePolicy)


def compute_lifetimes(g: GraphProgram, s: Schedule) -> dict[str, Lifetime]:
    """Def/last-use positions and idle windows for every tensor of g under s."""
    pos = s.position
    missing = [o.id for o in g.ops if o.id not in pos]
    if missing or len(s.order) != len(g.ops):
        raise ValueError(f"schedule does not cover graph ops (missing {missing[:3]})")

    n = len(s.order)
    accesses: dict[str, set[int]] = {t.id: set() for t in g.tensors}
    for op in g.ops:
        p = pos[op.id]
        for t in op.reads():
            if t in accesses:
                accesses[t].add(p)
        for t in op.outputs:
            if t in accesses:
                accesses[t].add(p)

    out: dict[str, Lifetime] = {}
    for t in g.tensors:
        marks = sorted(accesses[t.id])
        producer = g.producer_of.get(t.id)
        def_pos = pos[producer] if producer is not None else 0
        has_readers = bool(g.readers_of[t.id])
        if t.pinned:
            last_use = max(n - 1, def_pos)  # pinned residents never release
        elif has_readers:
            last_use = max(marks)
        elif producer is not None and t.kind == "workspace":
            last_use = def_pos  # scratch: dies with its producer
        else:
            # unread program state (outputs, preloaded caches): lives to the end
            last_use = max(n - 1, def_pos)

        windows: list[tuple[int, int]] = []
        if n > 0:
            cursor = def_pos
            for a in marks:
                if a > cursor:
                    windows.append((cursor, a - 1))
                cursor = max(cursor, a + 1)
            if cursor <= last_use:
                windows.append((cursor, last_use))
        else:
            last_use = def_pos
        out[t.id] = Lifetime(
            tensor_id=t.id,
            def_pos=def_pos,
            last_use_pos=last_use,
            idle_windows=tuple(windows),
            accesses=tuple(marks),
        )
    return out


def estimate_transfer_us(t: TensorDecl, m: MachineModel, direction: str) -> int:
    """fixed_latency_us + bytes / bandwidth for the chosen channel, nearest us."""
    if direction not in (R2D, D2R):
        raise ValueError(f"direction must be R2D or D2R, got {direction!r}")
    return m.transfer_us(t.bytes, direction)


def window_wall_time_us(g: GraphProgram, s: Schedule, window: tuple[int, int]) -> int:
    """Static wall-time estimate of a position window: sum of compute costs in it."""
    lo, hi = window
    total = 0
    for p in range(max(lo, 0), min(hi, len(s.order) - 1) + 1):
        op = g.op_by_id[s.order[p]]
        if op.kind == COMPUTE:
            total += op.cost_us
    return total


def select_candidates(
    g: GraphProgram,
    s: Schedule,
    lifetimes: dict[str, Lifetime],
    m: MachineModel,
    p: CandidatePolicy | None = None,
) -> OffloadPlan:
    """One entry per tensor whose largest idle window is worth a round trip.

    The wall-time estimate must strictly exceed min_gap_ratio x the transfer
    estimate (D2R + R2D for a reload cycle, D2R alone for terminal evictions).
    Pinned tensors, disabled kinds, small tensors and remote-initial tensors
    never qualify.
    """
    policy = p if p is not None else CandidatePolicy()
    n = len(s.order)
    entries: list[PlanEntry] = []
    for decl in sorted(g.tensors, key=lambda t: t.id):
        if decl.pinned or decl.initial_tier != "device":
            continue
        if decl.kind not in policy.kinds_enabled:
            continue
        if decl.bytes < policy.min_tensor_bytes:
            continue
        lt = lifetimes.get(decl.id)
        if lt is None:
            raise UnknownTensorError(f"no lifetime for tensor {decl.id!r}")
        window = lt.largest_idle_window()
        if window is None:
            continue
        wall = window_wall_time_us(g, s, window)
        terminal = window[1] >= n - 1 and window[1] == lt.last_use_pos and not any(
            a > window[1] for a in lt.accesses
        )
        rt = estimate_transfer_us(decl, m, D2R)
        if not terminal:
            rt += estimate_transfer_us(decl, m, R2D)
        if wall <= policy.min_gap_ratio * rt:
            continue
        evict_after = window[0] - 1
        reload_before = window[1] + 1 if not terminal else n
        entries.append(PlanEntry(decl.id, evict_after, reload_before))
    return OffloadPlan(entries=tuple(entries), policy=policy)


# --- JSON -------------------------------------------------------------------

def plan_to_dict(plan: OffloadPlan) -> dict:
    return {
        "policy": {
            "min_gap_ratio": plan.policy.min_gap_ratio,
            "min_tensor_bytes": plan.policy.min_tensor_bytes,
            "kinds_enabled": sorted(plan.policy.kinds_enabled),
        },
        "entries": [
            {
                "tensor_id": e.tensor_id,
                "evict_after_pos": e.evict_after_pos,
                "reload_before_pos": e.reload_before_pos,
            }
            for e in plan.entries
        ],
    }


def plan_to_json(plan: OffloadPlan, indent: int | None = 2) -> str:
    return json.dumps(plan_to_dict(plan), indent=indent)


def plan_from_dict(d: dict) -> OffloadPlan:
    unknown = set(d) - {"policy", "entries"}
    if unknown:
        raise ValueError(f"unknown plan key(s): {sorted(unknown)}")
    pol = d.get("policy", {})
    policy = CandidatePolicy(
        min_gap_ratio=float(pol.get("min_gap_ratio", 2.0)),
        min_tensor_bytes=int(pol.get("min_tensor_bytes", 1 << 20)),
        kinds_enabled=frozenset(pol.get("kinds_enabled", ("activation", "optimizer_state", "kv_block"))),
    )
    entries = tuple(
        PlanEntry(str(e["tensor_id"]), int(e["evict_after_pos"]), int(e["reload_before_pos"]))
        for e in d.get("entries", [])
    )
    return OffloadPlan(entries=entries, policy=policy)
