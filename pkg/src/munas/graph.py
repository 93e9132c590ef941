"""Lowering of architecture templates to concrete operator graphs.

The operator graph is a DAG of shape-annotated nodes; it is the unit all
resource analyzers work on.  Lowering is deterministic: identical
(template, input) pairs produce structurally identical graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .arch import (
    AVG,
    DEPTHWISE,
    FULL,
    PARALLEL,
    ArchitectureTemplate,
    ConvLayerSpec,
    InputSpec,
)
from .errors import LoweringError

INPUT = "input"
CONV = "conv"
DEPTHWISE_CONV = "depthwise_conv"
MAX_POOL = "max_pool"
AVG_POOL = "avg_pool"
BATCH_NORM = "batch_norm"
RELU = "relu"
ADD = "add"
DENSE = "dense"
OUTPUT = "output"

# Element-wise operators that reuse their input buffer.
IN_PLACE_KINDS = frozenset({BATCH_NORM, RELU, ADD})


@dataclass(frozen=True, eq=True)
class Operator:
    id: int
    kind: str
    output_shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OperatorGraph:
    nodes: tuple[Operator, ...]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        by_id = {n.id: n for n in self.nodes}
        ins: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        outs: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for src, dst in self.edges:
            ins[dst].append(src)
            outs[src].append(dst)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_ins", ins)
        object.__setattr__(self, "_outs", outs)

    def node(self, node_id: int) -> Operator:
        return self._by_id[node_id]

    def inputs_of(self, node_id: int) -> list[int]:
        return list(self._ins[node_id])

    def consumers_of(self, node_id: int) -> list[int]:
        return list(self._outs[node_id])

    def computational_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.kind not in (INPUT, OUTPUT)]

    def input_node(self) -> Operator:
        return next(n for n in self.nodes if n.kind == INPUT)

    def output_node(self) -> Operator:
        return next(n for n in self.nodes if n.kind == OUTPUT)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def downsampled(shape: tuple[int, int, int], stride: int) -> tuple[int, int, int]:
    h, w, c = shape
    return (ceil_div(h, stride), ceil_div(w, stride), c)


class _Builder:
    def __init__(self):
        self.nodes: list[Operator] = []
        self.edges: list[tuple[int, int]] = []

    def add(self, kind: str, output_shape: tuple[int, ...], attrs: dict, inputs: tuple[int, ...]) -> int:
        node_id = len(self.nodes)
        self.nodes.append(Operator(node_id, kind, output_shape, attrs))
        for src in inputs:
            self.edges.append((src, node_id))
        return node_id

    def shape(self, node_id: int) -> tuple[int, ...]:
        return self.nodes[node_id].output_shape

    def graph(self) -> OperatorGraph:
        return OperatorGraph(tuple(self.nodes), tuple(self.edges))


def _lower_layer(b: _Builder, layer: ConvLayerSpec, src: int, bi: int, li: int) -> int:
    where = f"block {bi} layer {li}"
    cur = src
    if layer.pre_pool:
        h, w, c = b.shape(cur)
        if min(h, w) < 2:
            raise LoweringError(f"spatial underflow: {where} pre-pool on {h}x{w} input")
        cur = b.add(MAX_POOL, downsampled((h, w, c), 2), {"size": 2, "stride": 2, "role": "pre_pool"}, (cur,))
    h, w, c_in = b.shape(cur)
    if layer.stride > 1 and min(h, w) < layer.stride:
        raise LoweringError(f"spatial underflow: {where} stride {layer.stride} conv on {h}x{w} input")
    out_hw = (ceil_div(h, layer.stride), ceil_div(w, layer.stride))
    if layer.kind == FULL:
        c_out = layer.channels
        cur = b.add(
            CONV,
            (*out_hw, c_out),
            {"kernel": layer.kernel, "stride": layer.stride, "c_in": c_in, "c_out": c_out,
             "origin": ("block", bi, li)},
            (cur,),
        )
    else:
        cur = b.add(
            DEPTHWISE_CONV,
            (*out_hw, c_in),
            {"kernel": layer.kernel, "stride": layer.stride, "c_in": c_in, "c_out": c_in,
             "origin": ("block", bi, li)},
            (cur,),
        )
    if layer.batch_norm:
        cur = b.add(BATCH_NORM, b.shape(cur), {"channels": b.shape(cur)[-1], "origin": ("block", bi, li)}, (cur,))
    if layer.relu:
        cur = b.add(RELU, b.shape(cur), {}, (cur,))
    return cur


def _matching_stride(big: tuple[int, int], small: tuple[int, int]) -> int | None:
    bh, bw = big
    sh, sw = small
    for s in range(1, bh + 1):
        if ceil_div(bh, s) == sh and ceil_div(bw, s) == sw:
            return s
    return None


def _merge(b: _Builder, left: int, right: int, bi: int) -> int:
    """Add-merge two branches, inserting a 1x1 projection when shapes differ.

    The projection goes on the spatially larger branch (a conv can only
    downsample); with equal spatial dims it goes on the branch with fewer
    channels.  Repair operators count toward every resource metric.
    """
    ls, rs = b.shape(left), b.shape(right)
    if ls == rs:
        return b.add(ADD, ls, {}, (left, right))
    lh, lw, lc = ls
    rh, rw, rc = rs
    if (lh, lw) != (rh, rw):
        if lh * lw >= rh * rw:
            src, src_shape, target = left, ls, rs
            other = right
        else:
            src, src_shape, target = right, rs, ls
            other = left
        stride = _matching_stride(src_shape[:2], target[:2])
        if stride is None:
            raise LoweringError(
                f"block {bi}: cannot match branch shapes {ls} vs {rs} with a strided projection")
    elif lc <= rc:
        src, src_shape, target, other = left, ls, rs, right
        stride = 1
    else:
        src, src_shape, target, other = right, rs, ls, left
        stride = 1
    repaired = b.add(
        CONV,
        target,
        {"kernel": 1, "stride": stride, "c_in": src_shape[2], "c_out": target[2],
         "origin": ("repair", bi)},
        (src,),
    )
    return b.add(ADD, target, {}, ((other, repaired) if src == right else (repaired, other)))


def lower(template: ArchitectureTemplate, input_spec: InputSpec) -> OperatorGraph:
    """Lower a template to an operator graph; raises LoweringError on underflow."""
    b = _Builder()
    input_id = b.add(INPUT, (input_spec.height, input_spec.width, input_spec.channels), {}, ())
    prev_input = input_id
    prev_output = input_id
    for bi, block in enumerate(template.blocks):
        if bi > 0 and block.connection == PARALLEL:
            branch_in = prev_input
            cur = branch_in
            for li, layer in enumerate(block.layers):
                cur = _lower_layer(b, layer, cur, bi, li)
            prev_output = _merge(b, prev_output, cur, bi)
            # prev_input unchanged: a following parallel block branches from
            # the same origin tensor
        else:
            branch_in = prev_output
            cur = branch_in
            for li, layer in enumerate(block.layers):
                cur = _lower_layer(b, layer, cur, bi, li)
            prev_input = branch_in
            prev_output = cur
    h, w, c = b.shape(prev_output)
    pool_kind = AVG_POOL if template.final_pool == AVG else MAX_POOL
    pooled = b.add(
        pool_kind,
        downsampled((h, w, c), template.pool_size),
        {"size": template.pool_size, "stride": template.pool_size, "role": "final"},
        (prev_output,),
    )
    cur = pooled
    in_units = math.prod(b.shape(cur))
    for di, units in enumerate(template.dense_layers):
        cur = b.add(DENSE, (units,), {"in_units": in_units, "out_units": units, "origin": ("dense", di)}, (cur,))
        cur = b.add(RELU, (units,), {}, (cur,))
        in_units = units
    cur = b.add(
        DENSE,
        (input_spec.num_classes,),
        {"in_units": in_units, "out_units": input_spec.num_classes, "origin": ("classifier",)},
        (cur,),
    )
    b.add(OUTPUT, (input_spec.num_classes,), {}, (cur,))
    return b.graph()


def topological_order(g: OperatorGraph) -> list[int] | None:
    """Kahn's algorithm; None if the graph has a cycle."""
    indeg = {n.id: 0 for n in g.nodes}
    for _, dst in g.edges:
        indeg[dst] += 1
    ready = [nid for nid, d in sorted(indeg.items()) if d == 0]
    order: list[int] = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        for succ in g.consumers_of(nid):
            indeg[succ] -= 1
            if indeg[succ] == 0:
                ready.append(succ)
    return order if len(order) == len(g.nodes) else None


def check_graph(g: OperatorGraph) -> list[str]:
    """Structural invariants of an operator graph; empty list when sound."""
    out: list[str] = []
    ids = {n.id for n in g.nodes}
    for src, dst in g.edges:
        if src not in ids or dst not in ids:
            out.append(f"edge ({src}, {dst}) references unknown node")
            return out
    if topological_order(g) is None:
        out.append("graph has a cycle")
    n_inputs = sum(1 for n in g.nodes if n.kind == INPUT)
    n_outputs = sum(1 for n in g.nodes if n.kind == OUTPUT)
    if n_inputs != 1:
        out.append(f"expected exactly one input node, found {n_inputs}")
    if n_outputs != 1:
        out.append(f"expected exactly one output node, found {n_outputs}")
    for node in g.nodes:
        in_shapes = [g.node(i).output_shape for i in g.inputs_of(node.id)]
        kind = node.kind
        where = f"node {node.id} ({kind})"
        if kind == INPUT:
            if in_shapes:
                out.append(f"{where}: input node must have no producers")
            continue
        if kind == ADD:
            if len(in_shapes) != 2:
                out.append(f"{where}: add must have exactly two inputs")
            elif in_shapes[0] != in_shapes[1]:
                out.append(f"{where}: add inputs differ {in_shapes[0]} vs {in_shapes[1]}")
            elif node.output_shape != in_shapes[0]:
                out.append(f"{where}: add output shape mismatch")
            continue
        if len(in_shapes) != 1:
            out.append(f"{where}: expected exactly one input")
            continue
        (src_shape,) = in_shapes
        if kind in (CONV, DEPTHWISE_CONV):
            if len(src_shape) != 3:
                out.append(f"{where}: convolution needs a spatial input")
                continue
            h, w, c = src_shape
            stride = node.attrs["stride"]
            expected = (ceil_div(h, stride), ceil_div(w, stride))
            if node.attrs["c_in"] != c:
                out.append(f"{where}: c_in {node.attrs['c_in']} != producer channels {c}")
            if kind == DEPTHWISE_CONV and node.attrs["c_out"] != c:
                out.append(f"{where}: depthwise c_out must equal c_in")
            if node.output_shape != (*expected, node.attrs["c_out"]):
                out.append(f"{where}: output shape {node.output_shape} != {(*expected, node.attrs['c_out'])}")
        elif kind in (MAX_POOL, AVG_POOL):
            if len(src_shape) != 3:
                out.append(f"{where}: pooling needs a spatial input")
                continue
            if node.output_shape != downsampled(src_shape, node.attrs["stride"]):
                out.append(f"{where}: output shape {node.output_shape} inconsistent with stride")
        elif kind in (BATCH_NORM, RELU):
            if node.output_shape != src_shape:
                out.append(f"{where}: element-wise op must preserve shape")
        elif kind == DENSE:
            if node.attrs["in_units"] != math.prod(src_shape):
                out.append(f"{where}: in_units {node.attrs['in_units']} != flattened producer size")
            if node.output_shape != (node.attrs["out_units"],):
                out.append(f"{where}: output shape mismatch")
        elif kind == OUTPUT:
            if node.output_shape != src_shape:
                out.append(f"{where}: output node must mirror its producer shape")
        else:
            out.append(f"{where}: unknown kind")
    return out
