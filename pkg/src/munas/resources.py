"""Resource analysis of operator graphs.

Three analyzers: minimum-over-schedules peak memory of int8 activation
buffers, model size in bytes at one byte per parameter, and multiply-
accumulate counts.  The peak-memory planner is exact: it searches all
topological orders with memoization and admissible pruning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import GraphTooLarge
from .graph import (
    ADD,
    AVG_POOL,
    BATCH_NORM,
    CONV,
    DENSE,
    DEPTHWISE_CONV,
    INPUT,
    MAX_POOL,
    OUTPUT,
    RELU,
    OperatorGraph,
)

DEFAULT_NODE_CAP = 64
BRUTE_FORCE_NODE_CAP = 10


@dataclass(frozen=True)
class ResourceProfile:
    peak_memory_bytes: int
    model_size_bytes: int
    macs: int


@dataclass(frozen=True)
class Schedule:
    order: tuple[int, ...]
    peak_bytes: int
    peak_step: int


def buffer_size(shape: tuple[int, ...]) -> int:
    """Bytes of an int8 activation buffer (one byte per element)."""
    return math.prod(shape)


@dataclass(frozen=True)
class BufferPlan:
    """Static buffer assignment for a graph under the in-place reuse rules.

    Each allocating node owns a buffer named by its node id; element-wise
    operators (batch norm, relu) and Add write into an input buffer.  The
    Add output aliases the input whose buffer would otherwise live longest,
    so exactly one merge input gets freed.
    """

    comp_nodes: tuple[int, ...]
    storage: dict  # node id -> buffer id
    sizes: dict  # buffer id -> bytes
    users: dict  # buffer id -> frozenset of computational node ids
    used_buffers: dict  # comp node id -> tuple of buffer ids it touches
    allocates: dict  # comp node id -> buffer id or None
    pinned: frozenset  # buffer ids never freed
    preds: dict  # comp node id -> frozenset of computational predecessors
    input_buffer: int
    input_bytes: int


def build_buffer_plan(g: OperatorGraph, add_aliasing: bool = True) -> BufferPlan:
    input_node = g.input_node()
    output_node = g.output_node()
    comp = tuple(nid for nid in (n.id for n in g.nodes) if nid not in (input_node.id, output_node.id))
    comp_set = set(comp)

    storage: dict[int, int] = {input_node.id: input_node.id}
    consumers_of_buffer: dict[int, set[int]] = {input_node.id: set(g.consumers_of(input_node.id))}
    for node in g.nodes:  # nodes are in a topological construction order
        nid = node.id
        if nid == input_node.id or nid == output_node.id:
            continue
        kind = node.kind
        if kind in (BATCH_NORM, RELU):
            buf = storage[g.inputs_of(nid)[0]]
        elif kind == ADD and add_aliasing:
            left, right = g.inputs_of(nid)
            lb, rb = storage[left], storage[right]
            extra_left = consumers_of_buffer[lb] - {nid}
            extra_right = consumers_of_buffer[rb] - {nid}
            if extra_left and not extra_right:
                buf = lb
            elif extra_right and not extra_left:
                buf = rb
            else:
                buf = min(lb, rb)
        else:
            buf = nid
        storage[nid] = buf
        consumers_of_buffer.setdefault(buf, set()).update(g.consumers_of(nid))

    sizes = {buf: buffer_size(g.node(buf).output_shape) for buf in set(storage.values())}

    users: dict[int, set[int]] = {buf: set() for buf in sizes}
    used_buffers: dict[int, list[int]] = {}
    for nid in comp:
        touched: list[int] = []
        for src in g.inputs_of(nid):
            touched.append(storage[src])
        touched.append(storage[nid])
        seen: list[int] = []
        for buf in touched:
            if buf not in seen:
                seen.append(buf)
                users[buf].add(nid)
        used_buffers[nid] = seen

    pinned = frozenset(storage[src] for src in g.inputs_of(output_node.id))
    allocates = {nid: (storage[nid] if storage[nid] == nid else None) for nid in comp}
    preds = {
        nid: frozenset(src for src in g.inputs_of(nid) if src in comp_set)
        for nid in comp
    }
    return BufferPlan(
        comp_nodes=comp,
        storage=storage,
        sizes=sizes,
        users={buf: frozenset(u) for buf, u in users.items()},
        used_buffers={nid: tuple(bufs) for nid, bufs in used_buffers.items()},
        allocates=allocates,
        pinned=pinned,
        preds=preds,
        input_buffer=input_node.id,
        input_bytes=buffer_size(input_node.output_shape),
    )


@dataclass(frozen=True)
class StepRow:
    step: int
    node_id: int
    allocated: int
    freed: int
    resident: int


def replay_schedule(g: OperatorGraph, order, add_aliasing: bool = True, plan: BufferPlan | None = None):
    """Independently replay an execution order; returns (peak, peak_step, rows).

    Raises ValueError if the order is not a topological permutation of the
    computational nodes.
    """
    if plan is None:
        plan = build_buffer_plan(g, add_aliasing)
    order = tuple(order)
    if sorted(order) != sorted(plan.comp_nodes):
        raise ValueError("order is not a permutation of the computational nodes")
    executed: set[int] = set()
    remaining = {buf: set(us) for buf, us in plan.users.items()}
    input_buf = g.input_node().id
    resident: dict[int, int] = {input_buf: plan.sizes[input_buf]}
    resident_bytes = plan.sizes[input_buf]
    peak = resident_bytes
    peak_step = -1
    rows: list[StepRow] = []
    for step, nid in enumerate(order):
        if not plan.preds[nid] <= executed:
            raise ValueError(f"order violates dependencies at node {nid}")
        allocated = 0
        buf = plan.allocates[nid]
        if buf is not None:
            resident[buf] = plan.sizes[buf]
            resident_bytes += plan.sizes[buf]
            allocated = plan.sizes[buf]
        if resident_bytes > peak:
            peak = resident_bytes
            peak_step = step
        freed = 0
        for touched in plan.used_buffers[nid]:
            rem = remaining[touched]
            rem.discard(nid)
            if not rem and touched not in plan.pinned and touched in resident:
                freed += resident.pop(touched)
        resident_bytes -= freed
        executed.add(nid)
        rows.append(StepRow(step, nid, allocated, freed, resident_bytes + freed))
    return peak, peak_step, rows


def _enumerate_orders(plan: BufferPlan):
    """Yield every topological order of the computational nodes."""
    comp = plan.comp_nodes
    indeg = {nid: len(plan.preds[nid]) for nid in comp}
    succs: dict[int, list[int]] = {nid: [] for nid in comp}
    for nid in comp:
        for p in plan.preds[nid]:
            succs[p].append(nid)
    ready = sorted(nid for nid in comp if indeg[nid] == 0)
    order: list[int] = []

    def walk():
        if len(order) == len(comp):
            yield tuple(order)
            return
        for i in range(len(ready)):
            nid = ready.pop(i)
            order.append(nid)
            opened = []
            for s in succs[nid]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    opened.append(s)
                    ready.append(s)
            yield from walk()
            for s in opened:
                ready.remove(s)
            for s in succs[nid]:
                indeg[s] += 1
            order.pop()
            ready.insert(i, nid)

    yield from walk()


def brute_force_peak_memory(g: OperatorGraph, add_aliasing: bool = True) -> Schedule:
    """Test oracle: full enumeration of topological orders with replay."""
    plan = build_buffer_plan(g, add_aliasing)
    if len(plan.comp_nodes) > BRUTE_FORCE_NODE_CAP:
        raise GraphTooLarge(
            f"{len(plan.comp_nodes)} computational nodes exceed the brute-force cap "
            f"of {BRUTE_FORCE_NODE_CAP}")
    if not plan.comp_nodes:
        return Schedule((), plan.input_bytes, -1)
    best: Schedule | None = None
    for order in _enumerate_orders(plan):
        peak, peak_step, _ = replay_schedule(g, order, add_aliasing, plan)
        if best is None or peak < best.peak_bytes:
            best = Schedule(order, peak, peak_step)
    assert best is not None
    return best


class _PlannerSim:
    """Incremental execution state over a buffer plan, with undo.

    Executed sets are tracked as a bitmask over comp-node positions; the
    mask is the memoization key.
    """

    def __init__(self, plan: BufferPlan):
        self.plan = plan
        self.bit = {nid: 1 << i for i, nid in enumerate(plan.comp_nodes)}
        self.indeg = {nid: len(plan.preds[nid]) for nid in plan.comp_nodes}
        self.succs: dict[int, list[int]] = {nid: [] for nid in plan.comp_nodes}
        for nid in plan.comp_nodes:
            for p in plan.preds[nid]:
                self.succs[p].append(nid)
        self.remaining = {buf: set(us) for buf, us in plan.users.items()}
        self.resident: dict[int, int] = {plan.input_buffer: plan.sizes[plan.input_buffer]}
        self.state_bytes = plan.sizes[plan.input_buffer]
        self.ready = {nid for nid in plan.comp_nodes if self.indeg[nid] == 0}
        self.executed_count = 0
        self.mask = 0
        # Unavoidable cost of executing a node: its own allocation plus all
        # of its input buffers resident.  Static, so usable as an admissible
        # bound over not-yet-executed nodes.
        floors = {}
        for nid in plan.comp_nodes:
            cost = sum(plan.sizes[buf] for buf in plan.used_buffers[nid]
                       if plan.allocates[nid] != buf)
            if plan.allocates[nid] is not None:
                cost += plan.sizes[plan.allocates[nid]]
            floors[nid] = cost
        self.floor_order = sorted(plan.comp_nodes, key=lambda nid: -floors[nid])
        self.floors = floors

    def max_floor_remaining(self) -> int:
        for nid in self.floor_order:
            if not self.mask & self.bit[nid]:
                return self.floors[nid]
        return 0

    def step_cost(self, nid: int) -> int:
        buf = self.plan.allocates[nid]
        if buf is not None and buf not in self.resident:
            return self.state_bytes + self.plan.sizes[buf]
        return self.state_bytes

    def candidates(self) -> list[tuple[int, int]]:
        """(step_bytes, node) options; zero-alloc nodes are dominant and forced."""
        forced = [nid for nid in self.ready if self.plan.allocates[nid] is None]
        if forced:
            return [(self.state_bytes, min(forced))]
        out = [(self.step_cost(nid), nid) for nid in self.ready]
        out.sort()
        return out

    def execute(self, nid: int):
        plan = self.plan
        buf = plan.allocates[nid]
        alloc = 0
        if buf is not None and buf not in self.resident:
            self.resident[buf] = plan.sizes[buf]
            alloc = plan.sizes[buf]
        self.state_bytes += alloc
        freed: list[int] = []
        for touched in plan.used_buffers[nid]:
            rem = self.remaining[touched]
            rem.discard(nid)
            if not rem and touched not in plan.pinned and touched in self.resident:
                freed.append(touched)
        for touched in freed:
            self.state_bytes -= self.resident.pop(touched)
        self.executed_count += 1
        self.mask |= self.bit[nid]
        self.ready.discard(nid)
        opened = []
        for s in self.succs[nid]:
            self.indeg[s] -= 1
            if self.indeg[s] == 0:
                opened.append(s)
                self.ready.add(s)
        return (nid, alloc, buf, freed, opened)

    def undo(self, token):
        nid, alloc, buf, freed, opened = token
        plan = self.plan
        for s in self.succs[nid]:
            self.indeg[s] += 1
        for s in opened:
            self.ready.discard(s)
        self.ready.add(nid)
        self.executed_count -= 1
        self.mask &= ~self.bit[nid]
        for touched in freed:
            self.resident[touched] = plan.sizes[touched]
            self.state_bytes += plan.sizes[touched]
        for touched in plan.used_buffers[nid]:
            self.remaining[touched].add(nid)
        if alloc:
            del self.resident[buf]
            self.state_bytes -= alloc


def _greedy_order(plan: BufferPlan) -> tuple[list[int], int]:
    sim = _PlannerSim(plan)
    order: list[int] = []
    peak = sim.state_bytes
    for _ in plan.comp_nodes:
        step_bytes, nid = sim.candidates()[0]
        peak = max(peak, step_bytes)
        sim.execute(nid)
        order.append(nid)
    return order, peak


def optimal_peak_memory(
    g: OperatorGraph, add_aliasing: bool = True, node_cap: int = DEFAULT_NODE_CAP
) -> Schedule:
    """Exact minimum peak working set over all topological orders.

    Branch and bound over execution states: a greedy schedule seeds the
    incumbent, states are memoized on the executed set (the resident set is
    a function of it) together with the bound in effect, and zero-allocation
    nodes are executed eagerly (a dominance argument keeps this exact).
    """
    plan = build_buffer_plan(g, add_aliasing)
    n = len(plan.comp_nodes)
    if n > node_cap:
        raise GraphTooLarge(f"{n} computational nodes exceed the planner cap of {node_cap}")
    if n == 0:
        return Schedule((), plan.input_bytes, -1)

    greedy, incumbent = _greedy_order(plan)
    sim = _PlannerSim(plan)
    # executed mask -> (value, bound): value is exact when value < bound
    memo: dict[int, tuple[int, int]] = {}

    def search(ub: int) -> int:
        """Min future peak from sim's state; exact when the result is < ub."""
        if sim.executed_count == n:
            return 0
        key = sim.mask
        hit = memo.get(key)
        if hit is not None:
            value, bound = hit
            if value < bound or ub <= bound:
                return value
        if sim.max_floor_remaining() >= ub:
            # some future step cannot beat the bound; fail without branching
            memo[key] = (ub, ub)
            return ub
        best = ub
        for step_bytes, nid in sim.candidates():
            if step_bytes >= best:
                break  # candidates are sorted by step cost
            token = sim.execute(nid)
            total = max(step_bytes, search(best))
            sim.undo(token)
            if total < best:
                best = total
        memo[key] = (best, ub)
        return best

    peak = min(incumbent, search(incumbent))

    if peak == incumbent:
        order = greedy
    else:
        order = _order_within(plan, peak)
    replayed_peak, peak_step, _ = replay_schedule(g, order, add_aliasing, plan)
    assert replayed_peak == peak, "planner bookkeeping disagrees with replay"
    return Schedule(tuple(order), peak, peak_step)


def _order_within(plan: BufferPlan, limit: int) -> list[int]:
    """Find a topological order whose every step fits within `limit` bytes."""
    sim = _PlannerSim(plan)
    n = len(plan.comp_nodes)
    order: list[int] = []
    dead: set[int] = set()

    def walk() -> bool:
        if len(order) == n:
            return True
        key = sim.mask
        if key in dead:
            return False
        for step_bytes, nid in sim.candidates():
            if step_bytes > limit:
                break
            token = sim.execute(nid)
            order.append(nid)
            if walk():
                return True
            order.pop()
            sim.undo(token)
        dead.add(key)
        return False

    found = walk()
    assert found, "no order achieves the computed optimum"
    return order


def node_model_size(node) -> int:
    """Parameter bytes of one operator at 8-bit weights."""
    if node.kind == CONV:
        k = node.attrs["kernel"]
        return k * k * node.attrs["c_in"] * node.attrs["c_out"] + node.attrs["c_out"]
    if node.kind == DEPTHWISE_CONV:
        k = node.attrs["kernel"]
        return k * k * node.attrs["c_in"] + node.attrs["c_in"]
    if node.kind == DENSE:
        return node.attrs["in_units"] * node.attrs["out_units"] + node.attrs["out_units"]
    return 0


def node_mac_count(node) -> int:
    """Multiply-accumulates of one operator; pooling, add, relu and batch norm cost none."""
    if node.kind == CONV:
        h, w, _ = node.output_shape
        k = node.attrs["kernel"]
        return h * w * k * k * node.attrs["c_in"] * node.attrs["c_out"]
    if node.kind == DEPTHWISE_CONV:
        h, w, _ = node.output_shape
        k = node.attrs["kernel"]
        return h * w * k * k * node.attrs["c_in"]
    if node.kind == DENSE:
        return node.attrs["in_units"] * node.attrs["out_units"]
    return 0


def model_size(g: OperatorGraph) -> int:
    """Parameter bytes at 8-bit weights; batch norm folds into its producer."""
    return sum(node_model_size(node) for node in g.nodes)


def mac_count(g: OperatorGraph) -> int:
    return sum(node_mac_count(node) for node in g.nodes)


def profile(
    g: OperatorGraph, add_aliasing: bool = True, node_cap: int = DEFAULT_NODE_CAP
) -> ResourceProfile:
    schedule = optimal_peak_memory(g, add_aliasing, node_cap)
    return ResourceProfile(
        peak_memory_bytes=schedule.peak_bytes,
        model_size_bytes=model_size(g),
        macs=mac_count(g),
    )
