"""Deterministic discrete-event simulator of a two-tier (device + remote pool) machine.

One compute stream and two DMA channels (one per transfer direction), each
FIFO in schedule order. Device memory is a real first-fit allocator so
fragmentation and compaction are observable. All times are integer
microseconds; runs are byte-for-byte reproducible.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace

from .graph_ir import (
    COMPUTE,
    DETACH,
    PREFETCH,
    STORE,
    STREAM_COMPUTE,
    STREAM_DMA_IN,
    STREAM_DMA_OUT,
    GraphProgram,
    Schedule,
)

R2D = "R2D"
D2R = "D2R"
H2R = "H2R"
R2H = "R2H"
D2D = "D2D"
DIRECTIONS = (R2D, D2R, H2R, R2H, D2D)

class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class MachineModel:
    """Capacities, per-channel bandwidths (bytes/us) and fixed latencies.

    H2R/R2H/D2D are extra named channels sharing the transfer formula; the
    default pipeline only exercises R2D and D2R.
    """

    device_capacity_bytes: int
    remote_capacity_bytes: int
    r2d_bandwidth_bytes_per_us: float
    d2r_bandwidth_bytes_per_us: float
    transfer_fixed_latency_us: int = 0
    compaction_bandwidth_bytes_per_us: float = 100_000.0
    reactive_orchestration_overhead_us: int = 0
    allocator_alignment_bytes: int = 512
    h2r_bandwidth_bytes_per_us: float | None = None
    r2h_bandwidth_bytes_per_us: float | None = None
    d2d_bandwidth_bytes_per_us: float | None = None

    def __post_init__(self):
        if self.device_capacity_bytes <= 0 or self.remote_capacity_bytes <= 0:
            raise ValueError("capacities must be > 0")
        if self.r2d_bandwidth_bytes_per_us <= 0 or self.d2r_bandwidth_bytes_per_us <= 0:
            raise ValueError("bandwidths must be > 0")
        if self.compaction_bandwidth_bytes_per_us <= 0:
            raise ValueError("compaction bandwidth must be > 0")
        a = self.allocator_alignment_bytes
        if a <= 0 or a & (a - 1):
            raise ValueError("allocator alignment must be a power of two")

    def bandwidth(self, direction: str) -> float:
        if direction == R2D:
            return self.r2d_bandwidth_bytes_per_us
        if direction == D2R:
            return self.d2r_bandwidth_bytes_per_us
        if direction == H2R:
            return self.h2r_bandwidth_bytes_per_us or self.d2r_bandwidth_bytes_per_us
        if direction == R2H:
            return self.r2h_bandwidth_bytes_per_us or self.r2d_bandwidth_bytes_per_us
        if direction == D2D:
            return self.d2d_bandwidth_bytes_per_us or self.r2d_bandwidth_bytes_per_us
        raise ValueError(f"unknown transfer direction {direction!r}")

    def transfer_us(self, nbytes: int, direction: str) -> int:
        """fixed latency + bytes / channel bandwidth, rounded to nearest us."""
        bw = self.bandwidth(direction)
        if bw <= 0:
            raise ValueError(f"channel {direction} has zero bandwidth")
        return int(round(self.transfer_fixed_latency_us + nbytes / bw))


def machine_to_dict(m: MachineModel) -> dict:
    d = {
        "device_capacity_bytes": m.device_capacity_bytes,
        "remote_capacity_bytes": m.remote_capacity_bytes,
        "r2d_bandwidth_bytes_per_us": m.r2d_bandwidth_bytes_per_us,
        "d2r_bandwidth_bytes_per_us": m.d2r_bandwidth_bytes_per_us,
        "transfer_fixed_latency_us": m.transfer_fixed_latency_us,
        "compaction_bandwidth_bytes_per_us": m.compaction_bandwidth_bytes_per_us,
        "reactive_orchestration_overhead_us": m.reactive_orchestration_overhead_us,
        "allocator_alignment_bytes": m.allocator_alignment_bytes,
    }
    for k in ("h2r_bandwidth_bytes_per_us", "r2h_bandwidth_bytes_per_us", "d2d_bandwidth_bytes_per_us"):
        v = getattr(m, k)
        if v is not None:
            d[k] = v
    return d


_MACHINE_FIELDS = {
    "device_capacity_bytes",
    "remote_capacity_bytes",
    "r2d_bandwidth_bytes_per_us",
    "d2r_bandwidth_bytes_per_us",
    "transfer_fixed_latency_us",
    "compaction_bandwidth_bytes_per_us",
    "reactive_orchestration_overhead_us",
    "allocator_alignment_bytes",
    "h2r_bandwidth_bytes_per_us",
    "r2h_bandwidth_bytes_per_us",
    "d2d_bandwidth_bytes_per_us",
}


def machine_from_dict(d: dict) -> MachineModel:
    unknown = set(d) - _MACHINE_FIELDS
    if unknown:
        raise ValueError(f"unknown machine key(s): {sorted(unknown)}")
    return MachineModel(**d)


def align_up(n: int, alignment: int) -> int:
    return (n + alignment - 1) & ~(alignment - 1)


class DeviceAllocator:
    """First-fit free-list allocator with immediate coalescing and compaction.

    Invariant: free extents are disjoint, sorted, coalesced, and
    sum(live) + sum(free) == capacity at all times.
    """

    def __init__(self, capacity: int, alignment: int = 512):
        self.capacity = capacity
        self.alignment = alignment
        self.free_list: list[tuple[int, int]] = [(0, capacity)]  # (offset, length)
        self.live: dict[str, tuple[int, int]] = {}

    @property
    def live_bytes(self) -> int:
        return sum(length for _, length in self.live.values())

    @property
    def total_free(self) -> int:
        return sum(length for _, length in self.free_list)

    @property
    def largest_free(self) -> int:
        return max((length for _, length in self.free_list), default=0)

    def check(self) -> None:
        total = self.total_free + self.live_bytes
        assert total == self.capacity, f"allocator leak: {total} != {self.capacity}"

    def alloc(self, name: str, nbytes: int) -> str:
        """Try to allocate. Returns 'ok', 'fragmented' or 'oom'."""
        assert name not in self.live, f"{name} already allocated"
        length = align_up(nbytes, self.alignment)
        for i, (off, flen) in enumerate(self.free_list):
            if flen >= length:
                if flen == length:
                    self.free_list.pop(i)
                else:
                    self.free_list[i] = (off + length, flen - length)
                self.live[name] = (off, length)
                return "ok"
        return "fragmented" if self.total_free >= length else "oom"

    def free(self, name: str) -> None:
        off, length = self.live.pop(name)
        self._insert_free(off, length)

    def _insert_free(self, off: int, length: int) -> None:
        lo, hi = 0, len(self.free_list)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.free_list[mid][0] < off:
                lo = mid + 1
            else:
                hi = mid
        self.free_list.insert(lo, (off, length))
        # coalesce with neighbours
        i = max(lo - 1, 0)
        while i < len(self.free_list) - 1:
            o1, l1 = self.free_list[i]
            o2, l2 = self.free_list[i + 1]
            if o1 + l1 == o2:
                self.free_list[i : i + 2] = [(o1, l1 + l2)]
            elif o1 + l1 > o2:
                raise AssertionError("overlapping free extents")
            else:
                i += 1

    def compact_for(self, nbytes: int) -> int:
        """Slide live extents toward offset 0 until a hole >= nbytes exists.

        Moves only what is needed; returns bytes moved. Caller guarantees
        total_free >= aligned request.
        """
        length = align_up(nbytes, self.alignment)
        moved = 0
        blocks = sorted(self.live.items(), key=lambda kv: kv[1][0])
        frontier = 0
        for name, (off, blen) in blocks:
            if off > frontier:
                self.live[name] = (frontier, blen)
                moved += blen
            frontier = self.live[name][0] + self.live[name][1]
            self._rebuild_free(blocks_hint=None)
            if self.largest_free >= length:
                return moved
        self._rebuild_free(blocks_hint=None)
        return moved

    def _rebuild_free(self, blocks_hint=None) -> None:
        spans = sorted(self.live.values())
        free = []
        cursor = 0
        for off, length in spans:
            if off > cursor:
                free.append((cursor, off - cursor))
            cursor = off + length
        if cursor < self.capacity:
            free.append((cursor, self.capacity - cursor))
        self.free_list = free


@dataclass(frozen=True)
class TimelineEntry:
    op: str
    stream: str
    start_us: int
    end_us: int


@dataclass(frozen=True)
class OomRecord:
    op: str
    requested_bytes: int
    free_bytes: int
    largest_contiguous_bytes: int
    tier: str = "device"


@dataclass
class SimReport:
    makespan_us: int
    peak_device_bytes: int
    exposed_comm_us: int
    overlapped_comm_us: int
    defrag_events: int
    defrag_time_us: int
    timeline: list[TimelineEntry]
    oom: OomRecord | None = None
    peak_remote_bytes: int = 0
    mem_samples: list[tuple[int, int]] = field(default_factory=list)

    @property
    def dma_busy_us(self) -> int:
        return self.exposed_comm_us + self.overlapped_comm_us


def report_to_dict(r: SimReport) -> dict:
    d = {
        "makespan_us": r.makespan_us,
        "peak_device_bytes": r.peak_device_bytes,
        "exposed_comm_us": r.exposed_comm_us,
        "overlapped_comm_us": r.overlapped_comm_us,
        "defrag_events": r.defrag_events,
        "defrag_time_us": r.defrag_time_us,
        "timeline": [{"op": e.op, "stream": e.stream, "start_us": e.start_us, "end_us": e.end_us} for e in r.timeline],
        "peak_remote_bytes": r.peak_remote_bytes,
        "mem_samples": [[t, b] for t, b in r.mem_samples],
        "oom": None,
    }
    if r.oom is not None:
        d["oom"] = {
            "op": r.oom.op,
            "requested_bytes": r.oom.requested_bytes,
            "free_bytes": r.oom.free_bytes,
            "largest_contiguous_bytes": r.oom.largest_contiguous_bytes,
            "tier": r.oom.tier,
        }
    return d


def report_to_json(r: SimReport, indent: int | None = 2) -> str:
    return json.dumps(report_to_dict(r), indent=indent)


def _family_plan(g: GraphProgram, s: Schedule):
    """Per storage family: producer-or-input start, final-free anchor, persistence.

    A family persists to the end of the run when any member is pinned or when
    its tail version has no readers and is not a workspace (program state such
    as weights, optimizer states or KV blocks).
    """
    pos = s.position
    touch: dict[str, list[int]] = {r: [] for r in g.alias_families}
    has_detach: dict[str, list[int]] = {r: [] for r in g.alias_families}
    for op in g.ops:
        p = pos.get(op.id)
        if p is None:
            continue
        for t in op.reads():
            if t in g.tensor_by_id:
                touch[g.alias_root(t)].append(p)
        for t in op.outputs:
            touch[g.alias_root(t)].append(p)
        if op.kind == DETACH and op.tensor_id in g.tensor_by_id:
            has_detach[g.alias_root(op.tensor_id)].append(p)

    persists: dict[str, bool] = {}
    final_free_at: dict[str, list[str]] = {}
    for root, members in g.alias_families.items():
        fam_decls = [g.tensor_by_id[t] for t in members]
        pinned = any(d.pinned for d in fam_decls)
        consumed = any(g.readers_of[t] for t in members)
        all_workspace = all(d.kind == "workspace" for d in fam_decls)
        persist = pinned or (not consumed and not all_workspace)
        persists[root] = persist
        if persist:
            continue
        touches = touch[root]
        last = max(touches) if touches else None
        if last is None:
            continue
        detaches = has_detach[root]
        if detaches and max(detaches) >= last:
            continue  # the trailing detach is the release point
        final_free_at.setdefault(s.order[last], []).append(root)
    return persists, final_free_at


def simulate(g: GraphProgram, s: Schedule, m: MachineModel) -> SimReport:
    """Execution of a schedule against the machine model.

    Dispatch is in order: a sequential launcher walks the schedule, waits for
    each op's dependency predecessors, then hands the op to its stream (this
    is what makes cache-op placement meaningful - an op never launches before
    the ops ahead of it could launch). Streams are FIFO and complete out of
    order; a busy stream delays only its own ops, never the launcher.
    Compute outputs and prefetches additionally need a successful device
    allocation: contiguity failures trigger compaction (counted, stalled at
    the compaction bandwidth); allocations that pending releases can never
    satisfy halt the run with an oom record.

    Heap mutations are applied in dispatch order. When an op stalls for
    memory while a later-dispatched op on another stream starts earlier in
    simulated time, releases between those two instants are applied with the
    earlier op; the approximation only arises under memory pressure with
    cross-stream races and never affects determinism.
    """
    order = list(s.order)
    if set(order) != {o.id for o in g.ops} or len(order) != len(g.ops):
        raise SimulationError("schedule does not cover the graph")
    stream_free = {STREAM_COMPUTE: 0, STREAM_DMA_IN: 0, STREAM_DMA_OUT: 0}
    end_time: dict[str, int] = {}
    preds = g.predecessors

    capacity = max(m.device_capacity_bytes, m.allocator_alignment_bytes)
    alloc = DeviceAllocator(capacity, m.allocator_alignment_bytes)
    resident: set[str] = set()  # family roots on device
    remote: set[str] = set()  # family roots with a remote copy
    remote_used = 0
    peak_remote = 0
    peak_device = 0
    mem_samples: list[tuple[int, int]] = []
    pending_frees: list[tuple[int, int, str]] = []  # (time, seq, root)
    seq = 0
    exposed = 0
    dma_busy = 0
    defrag_events = 0
    defrag_time = 0
    timeline: list[TimelineEntry] = []
    oom: OomRecord | None = None

    _, final_free_at = _family_plan(g, s)

    def record_sample(t: int) -> None:
        mem_samples.append((t, alloc.live_bytes))

    def apply_frees(t: int) -> None:
        while pending_frees and pending_frees[0][0] <= t:
            ft, _, root = heapq.heappop(pending_frees)
            if root in resident:
                alloc.free(root)
                resident.discard(root)
                record_sample(ft)

    def queue_free(t: int, root: str) -> None:
        nonlocal seq
        heapq.heappush(pending_frees, (t, seq, root))
        seq += 1

    def wait_alloc(root: str, t: int):
        """Allocate root at the earliest time >= t. Returns (status, time).

        Contiguity failures compact (one event each, stalled at the
        compaction bandwidth). Insufficient total bytes waits for pending
        releases; with none left the caller gets 'oom'.
        """
        nonlocal defrag_events, defrag_time, peak_device
        nbytes = g.tensor_by_id[root].bytes
        while True:
            apply_frees(t)
            res = alloc.alloc(root, nbytes)
            if res == "ok":
                resident.add(root)
                record_sample(t)
                peak_device = max(peak_device, alloc.live_bytes)
                return "ok", t
            if res == "fragmented":
                moved = alloc.compact_for(nbytes)
                defrag_events += 1
                stall = int(round(moved / m.compaction_bandwidth_bytes_per_us))
                defrag_time += stall
                t += stall
                res = alloc.alloc(root, nbytes)
                assert res == "ok", "compaction failed to open a hole"
                resident.add(root)
                record_sample(t)
                peak_device = max(peak_device, alloc.live_bytes)
                return "ok", t
            if not pending_frees:
                return "oom", t
            t = max(t, pending_frees[0][0])

    # graph inputs: device-initial families occupy memory from t=0
    input_roots = sorted(r for r in g.alias_families if r not in g.producer_of)
    for root in input_roots:
        decl = g.tensor_by_id[root]
        if decl.initial_tier == "device":
            res = alloc.alloc(root, decl.bytes)
            if res != "ok":
                oom = OomRecord("<init>", align_up(decl.bytes, m.allocator_alignment_bytes), alloc.total_free, alloc.largest_free)
                break
            resident.add(root)
            record_sample(0)
            peak_device = max(peak_device, alloc.live_bytes)
        else:
            remote.add(root)
            remote_used += decl.bytes
            peak_remote = max(peak_remote, remote_used)
            if remote_used > m.remote_capacity_bytes:
                oom = OomRecord("<init>", decl.bytes, m.remote_capacity_bytes - (remote_used - decl.bytes), 0, tier="remote")
                break

    launch_clock = 0  # the dispatcher's position in time
    for opid in order:
        if oom is not None:
            break
        op = g.op_by_id[opid]
        st = s.streams[opid]
        prev_launch = launch_clock
        for p in preds[opid]:
            launch_clock = max(launch_clock, end_time[p])
        t0 = max(launch_clock, stream_free[st])
        apply_frees(t0)  # residency checks must see every due release

        if op.kind == COMPUTE:
            for t in op.reads():
                root = g.alias_root(t)
                if root not in resident:
                    raise SimulationError(f"op {opid!r} reads tensor {t!r} which is not device-resident (use-after-evict?)")
            for out in op.outputs:
                root = g.alias_root(out)
                if root in resident:
                    continue  # alias family already materialized
                status, t0 = wait_alloc(root, t0)
                if status != "ok":
                    req = align_up(g.tensor_by_id[root].bytes, m.allocator_alignment_bytes)
                    oom = OomRecord(opid, req, alloc.total_free, alloc.largest_free)
                    break
            if oom is not None:
                break
        elif op.kind == PREFETCH:
            root = g.alias_root(op.tensor_id)
            if root not in resident:
                status, t0 = wait_alloc(root, t0)
                if status != "ok":
                    req = align_up(g.tensor_by_id[root].bytes, m.allocator_alignment_bytes)
                    oom = OomRecord(opid, req, alloc.total_free, alloc.largest_free)
                    break
        elif op.kind == STORE:
            root = g.alias_root(op.tensor_id)
            if root not in resident:
                raise SimulationError(f"store {opid!r} on non-resident tensor {op.tensor_id!r}")

        start = t0
        if op.kind == COMPUTE:
            dur = op.cost_us
        elif op.kind == PREFETCH:
            dur = m.transfer_us(g.tensor_by_id[g.alias_root(op.tensor_id)].bytes, R2D)
        elif op.kind == STORE:
            dur = m.transfer_us(g.tensor_by_id[g.alias_root(op.tensor_id)].bytes, D2R)
        else:
            dur = 0
        endt = start + dur

        if st == STREAM_COMPUTE:
            # idle attributable to transfers: the tail of the wait decided by a
            # transfer predecessor; dependency/launch idle is charged to neither
            d_tx = 0
            d_other = 0
            for p in preds[opid]:
                if g.op_by_id[p].is_transfer():
                    d_tx = max(d_tx, end_time[p])
                else:
                    d_other = max(d_other, end_time[p])
            base = max(stream_free[st], d_other, prev_launch)
            if d_tx > base:
                exposed += d_tx - base
        else:
            dma_busy += dur

        if op.kind == DETACH:
            queue_free(endt, g.alias_root(op.tensor_id))
        elif op.kind == STORE:
            root = g.alias_root(op.tensor_id)
            if root not in remote:
                remote.add(root)
                remote_used += g.tensor_by_id[root].bytes
                peak_remote = max(peak_remote, remote_used)
                if remote_used > m.remote_capacity_bytes:
                    oom = OomRecord(opid, g.tensor_by_id[root].bytes, m.remote_capacity_bytes - (remote_used - g.tensor_by_id[root].bytes), 0, tier="remote")
                    break

        for root in final_free_at.get(opid, ()):  # last-consumer release
            queue_free(endt, root)

        end_time[opid] = endt
        stream_free[st] = endt
        timeline.append(TimelineEntry(opid, st, start, endt))

    # drain remaining frees so the occupancy series is complete
    apply_frees(1 << 62)

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


def peak_memory_no_offload(g: GraphProgram, s: Schedule, m: MachineModel) -> int:
    """Peak device bytes with every tensor device-resident and no capacity limit."""
    tensors = tuple(replace(t, initial_tier="device", pinned=t.pinned) for t in g.tensors)
    g2 = GraphProgram(tensors=tensors, ops=g.ops, control_edges=g.control_edges)
    cap = sum(align_up(t.bytes, m.allocator_alignment_bytes) for t in g.tensors) + m.allocator_alignment_bytes
    m2 = replace(m, device_capacity_bytes=max(cap, m.device_capacity_bytes), remote_capacity_bytes=max(cap, m.remote_capacity_bytes))
    report = simulate(g2, s, m2)
    if report.oom is not None:
        raise SimulationError(f"unexpected oom in no-offload peak run: {report.oom}")
    return report.peak_device_bytes


_TRACE_TID = {STREAM_COMPUTE: 1, STREAM_DMA_IN: 2, STREAM_DMA_OUT: 3}


def emit_trace(report: SimReport) -> dict:
    """Chrome-trace-event document: one complete event per timeline entry plus
    device-occupancy counter events at every allocation/free."""
    events = []
    for e in report.timeline:
        events.append(
            {
                "name": e.op,
                "cat": e.stream,
                "ph": "X",
                "pid": 1,
                "tid": _TRACE_TID[e.stream],
                "ts": e.start_us,
                "dur": e.end_us - e.start_us,
            }
        )
    for t, nbytes in report.mem_samples:
        events.append(
            {
                "name": "device_bytes",
                "ph": "C",
                "pid": 1,
                "ts": t,
                "args": {"bytes": nbytes},
            }
        )
    return {"traceEvents": events, "displayTimeUnit": "ms"}


def trace_to_json(report: SimReport, indent: int | None = None) -> str:
    return json.dumps(emit_trace(report), indent=indent)
