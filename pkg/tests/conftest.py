import pytest

from tiersched import GraphProgram, MachineModel, OpNode, TensorDecl


def tensor(tid, nbytes=1 << 20, kind="activation", tier="device", pinned=False, alias_of=None):
    return TensorDecl(id=tid, bytes=nbytes, kind=kind, initial_tier=tier, pinned=pinned, alias_of=alias_of)


def compute(oid, inputs=(), outputs=(), cost=100):
    return OpNode(id=oid, kind="compute", inputs=tuple(inputs), outputs=tuple(outputs), cost_us=cost)


def cache(oid, kind, tid):
    return OpNode(id=oid, kind=kind, tensor_id=tid)


def chain_graph(n, cost=100, nbytes=1 << 20):
    """a0 -> a1 -> ... -> a{n-1} through tensors t0..t{n-2}."""
    tensors = [tensor(f"t{i}", nbytes) for i in range(n)]
    ops = []
    for i in range(n):
        inputs = (f"t{i - 1}",) if i > 0 else ()
        ops.append(compute(f"a{i}", inputs, (f"t{i}",), cost))
    return GraphProgram(tensors=tuple(tensors), ops=tuple(ops))


@pytest.fixture
def small_machine():
    return MachineModel(
        device_capacity_bytes=1 << 34,
        remote_capacity_bytes=1 << 40,
        r2d_bandwidth_bytes_per_us=33_600.0,
        d2r_bandwidth_bytes_per_us=33_600.0,
    )
