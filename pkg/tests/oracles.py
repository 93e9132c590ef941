"""Independent oracles the tests check the engine against.

Everything here recomputes results from first principles (enumeration,
per-layer formulas, O(n^2) filters) without calling the code under test.
"""

from __future__ import annotations

import math
import random

from munas.arch import FULL, ArchitectureTemplate, InputSpec
from munas.graph import Operator, OperatorGraph


def ceil_div(a: int, b: int) -> int:
    return math.ceil(a / b)


def serial_template_counts(template: ArchitectureTemplate, input_spec: InputSpec):
    """(params, macs) for serial-only templates, by hand-walked formulas."""
    assert all(b.connection == "serial" for b in template.blocks)
    h, w, c = input_spec.height, input_spec.width, input_spec.channels
    params = 0
    macs = 0
    for block in template.blocks:
        for layer in block.layers:
            if layer.pre_pool:
                h, w = ceil_div(h, 2), ceil_div(w, 2)
            h, w = ceil_div(h, layer.stride), ceil_div(w, layer.stride)
            k = layer.kernel
            if layer.kind == FULL:
                params += k * k * c * layer.channels + layer.channels
                macs += h * w * k * k * c * layer.channels
                c = layer.channels
            else:
                params += k * k * c + c
                macs += h * w * k * k * c
    h, w = ceil_div(h, template.pool_size), ceil_div(w, template.pool_size)
    units_in = h * w * c
    for units in template.dense_layers:
        params += units_in * units + units
        macs += units_in * units
        units_in = units
    params += units_in * input_spec.num_classes + input_spec.num_classes
    macs += units_in * input_spec.num_classes
    return params, macs


def graph_formula_counts(g: OperatorGraph):
    """(params, macs) recomputed from node attributes and producer shapes."""
    params = 0
    macs = 0
    for node in g.nodes:
        if node.kind in ("conv", "depthwise_conv"):
            (src,) = g.inputs_of(node.id)
            h_in, w_in, c_in = g.node(src).output_shape
            k = node.attrs["kernel"]
            s = node.attrs["stride"]
            h_out, w_out = ceil_div(h_in, s), ceil_div(w_in, s)
            if node.kind == "conv":
                c_out = node.attrs["c_out"]
                params += k * k * c_in * c_out + c_out
                macs += h_out * w_out * k * k * c_in * c_out
            else:
                params += k * k * c_in + c_in
                macs += h_out * w_out * k * k * c_in
        elif node.kind == "dense":
            (src,) = g.inputs_of(node.id)
            u_in = math.prod(g.node(src).output_shape)
            u_out = node.attrs["out_units"]
            params += u_in * u_out + u_out
            macs += u_in * u_out
    return params, macs


def pareto_filter(points):
    """O(n^2) non-dominated filter over (id, 4-tuple) points.

    Keeps a point unless another strictly dominates it or an earlier point
    equals it (mirrors archive first-wins semantics for duplicates).
    """

    def dominates(a, b):
        return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))

    kept = []
    for i, (pid, vec) in enumerate(points):
        dominated = any(dominates(other, vec) for _, other in points)
        duplicate = any(other == vec for _, other in points[:i])
        if not dominated and not duplicate:
            kept.append((pid, vec))
    return kept


def random_dag(rng: random.Random, n_comp: int) -> OperatorGraph:
    """Small random operator DAG with in-place nodes, for planner oracles."""
    nodes = [Operator(0, "input", (rng.randint(2, 24),), {})]
    edges: list[tuple[int, int]] = []
    for nid in range(1, n_comp + 1):
        roll = rng.random()
        by_shape: dict[tuple, list[int]] = {}
        for node in nodes:
            by_shape.setdefault(node.output_shape, []).append(node.id)
        mergeable = [ids for ids in by_shape.values() if len(ids) >= 2]
        if roll < 0.25 and mergeable:
            srcs = rng.sample(rng.choice(mergeable), 2)
            nodes.append(Operator(nid, "add", nodes[srcs[0]].output_shape, {}))
            edges.extend((s, nid) for s in srcs)
        elif roll < 0.45:
            src = rng.randrange(nid)
            nodes.append(Operator(nid, rng.choice(("relu", "batch_norm")),
                                  nodes[src].output_shape, {}))
            edges.append((src, nid))
        else:
            src = rng.randrange(nid)
            nodes.append(Operator(nid, rng.choice(("conv", "dense", "max_pool")),
                                  (rng.randint(2, 40),), {}))
            edges.append((src, nid))
    produced = {src for src, _ in edges}
    sinks = [node.id for node in nodes[1:] if node.id not in produced]
    out_id = n_comp + 1
    nodes.append(Operator(out_id, "output", (1,), {}))
    edges.extend((s, out_id) for s in sinks)
    return OperatorGraph(tuple(nodes), tuple(edges))
