import random
from dataclasses import replace

import pytest

from munas.arch import InputSpec
from munas.errors import GraphTooLarge
from munas.evaluators.proxy import scale_template
from munas.graph import Operator, OperatorGraph, lower
from munas.resources import (
    brute_force_peak_memory,
    buffer_size,
    build_buffer_plan,
    mac_count,
    model_size,
    optimal_peak_memory,
    profile,
    replay_schedule,
)
from munas.space import SearchSpaceConfig, random_architecture

from .oracles import graph_formula_counts, random_dag, serial_template_counts


def vector_chain(*sizes):
    """Input -> n ops -> Output with given buffer sizes."""
    nodes = [Operator(0, "input", (sizes[0],), {})]
    edges = []
    for i, size in enumerate(sizes[1:], start=1):
        nodes.append(Operator(i, "dense", (size,), {"in_units": sizes[i - 1], "out_units": size}))
        edges.append((i - 1, i))
    out = len(nodes)
    nodes.append(Operator(out, "output", (sizes[-1],), {}))
    edges.append((out - 1, out))
    return OperatorGraph(tuple(nodes), tuple(edges))


def residual_diamond(size=64):
    """Input feeds one conv and a skip edge straight into the merge."""
    nodes = (
        Operator(0, "input", (size,), {}),
        Operator(1, "conv", (size,), {"kernel": 1, "stride": 1, "c_in": 1, "c_out": 1}),
        Operator(2, "add", (size,), {}),
        Operator(3, "output", (size,), {}),
    )
    return OperatorGraph(nodes, ((0, 1), (0, 2), (1, 2), (2, 3)))


def test_buffer_size_values():
    assert buffer_size((14, 14, 8)) == 1568
    assert buffer_size((1, 1, 1)) == 1
    assert buffer_size((256,)) == 256


def test_chain_peak_is_three_hundred():
    g = vector_chain(100, 200, 50)
    schedule = optimal_peak_memory(g)
    assert schedule.peak_bytes == 300  # step of the 200-byte op holds 100+200
    assert schedule.peak_step == 0


def test_single_order_chain_matches_brute_force():
    g = vector_chain(10, 30, 20, 5)
    assert optimal_peak_memory(g).peak_bytes == brute_force_peak_memory(g).peak_bytes


def test_add_aliasing_saves_exactly_one_merge_buffer():
    g = residual_diamond(64)
    with_alias = optimal_peak_memory(g, add_aliasing=True)
    without = optimal_peak_memory(g, add_aliasing=False)
    assert with_alias.peak_bytes == 128
    assert without.peak_bytes == 192
    assert without.peak_bytes - with_alias.peak_bytes == 64
    assert brute_force_peak_memory(g, True).peak_bytes == 128
    assert brute_force_peak_memory(g, False).peak_bytes == 192


def branch_order_graph():
    """Two chains with large transients; execution order changes the peak."""
    nodes = (
        Operator(0, "input", (4,), {}),
        Operator(1, "conv", (100,), {"kernel": 1, "stride": 1, "c_in": 1, "c_out": 1}),
        Operator(2, "conv", (4,), {"kernel": 1, "stride": 1, "c_in": 1, "c_out": 1}),
        Operator(3, "conv", (100,), {"kernel": 1, "stride": 1, "c_in": 1, "c_out": 1}),
        Operator(4, "conv", (4,), {"kernel": 1, "stride": 1, "c_in": 1, "c_out": 1}),
        Operator(5, "add", (4,), {}),
        Operator(6, "output", (4,), {}),
    )
    edges = ((0, 1), (1, 2), (0, 3), (3, 4), (2, 5), (4, 5), (5, 6))
    return OperatorGraph(nodes, edges)


def test_branch_graph_orders_differ_and_planner_returns_minimum():
    g = branch_order_graph()
    plan = build_buffer_plan(g, True)
    peaks = set()
    from munas.resources import _enumerate_orders

    for order in _enumerate_orders(plan):
        peak, _, _ = replay_schedule(g, order, True, plan)
        peaks.add(peak)
    assert len(peaks) >= 2
    assert min(peaks) == 108 and max(peaks) >= 204
    assert optimal_peak_memory(g).peak_bytes == 108
    assert brute_force_peak_memory(g).peak_bytes == 108


def test_solver_equals_brute_force_on_random_dags():
    rng = random.Random(31)
    for _ in range(300):
        g = random_dag(rng, rng.randint(2, 8))
        for aliasing in (True, False):
            a = brute_force_peak_memory(g, aliasing)
            b = optimal_peak_memory(g, aliasing)
            assert a.peak_bytes == b.peak_bytes


def test_returned_schedule_replays_exactly(space_cfg, input_28):
    rng = random.Random(5)
    for _ in range(40):
        t = random_architecture(space_cfg, input_28, rng)
        g = lower(t, input_28)
        try:
            schedule = optimal_peak_memory(g)
        except GraphTooLarge:
            continue
        peak, step, _ = replay_schedule(g, schedule.order)
        assert peak == schedule.peak_bytes
        assert step == schedule.peak_step


def test_schedule_order_is_topological():
    rng = random.Random(77)
    for _ in range(100):
        g = random_dag(rng, rng.randint(2, 8))
        schedule = optimal_peak_memory(g)
        plan = build_buffer_plan(g, True)
        seen = set()
        for nid in schedule.order:
            assert plan.preds[nid] <= seen
            seen.add(nid)


def test_peak_monotone_in_buffer_sizes():
    rng = random.Random(13)
    for _ in range(150):
        g = random_dag(rng, rng.randint(2, 7))
        base = optimal_peak_memory(g).peak_bytes
        victim = rng.choice([n for n in g.nodes if n.kind != "output"])
        grown = tuple(
            replace(n, output_shape=(n.output_shape[0] + 17,)) if n.id == victim.id else n
            for n in g.nodes
        )
        bumped = optimal_peak_memory(OperatorGraph(grown, g.edges)).peak_bytes
        assert bumped >= base


def test_peak_lower_bound_is_max_node_working_set():
    rng = random.Random(57)
    for _ in range(100):
        g = random_dag(rng, rng.randint(2, 8))
        plan = build_buffer_plan(g, True)
        sched = optimal_peak_memory(g)
        for nid in plan.comp_nodes:
            floor = sum(plan.sizes[buf] for buf in plan.used_buffers[nid])
            assert sched.peak_bytes >= floor


def test_pruning_dominates_componentwise(space_cfg, input_28):
    rng = random.Random(2)
    for _ in range(40):
        t = random_architecture(space_cfg, input_28, rng)
        g = lower(t, input_28)
        try:
            base = profile(g)
        except GraphTooLarge:
            continue
        pruned = profile(lower(scale_template(t, 0.5), input_28))
        assert pruned.peak_memory_bytes <= base.peak_memory_bytes
        assert pruned.model_size_bytes <= base.model_size_bytes
        assert pruned.macs <= base.macs


def test_model_size_formula_values(input_28):
    g = OperatorGraph(
        (
            Operator(0, "input", (16, 16, 8), {}),
            Operator(1, "conv", (16, 16, 16), {"kernel": 3, "stride": 1, "c_in": 8, "c_out": 16}),
            Operator(2, "depthwise_conv", (16, 16, 16),
                     {"kernel": 3, "stride": 1, "c_in": 16, "c_out": 16}),
            Operator(3, "dense", (10,), {"in_units": 100, "out_units": 10}),
            Operator(4, "output", (10,), {}),
        ),
        ((0, 1), (1, 2), (2, 3), (3, 4)),
    )
    # 3*3*8*16+16 = 1168; depthwise 3*3*16+16 = 160; dense 100*10+10 = 1010
    assert model_size(g) == 1168 + 160 + 1010


def test_mac_count_formula_values():
    conv_s1 = OperatorGraph(
        (
            Operator(0, "input", (16, 16, 8), {}),
            Operator(1, "conv", (16, 16, 16), {"kernel": 3, "stride": 1, "c_in": 8, "c_out": 16}),
            Operator(2, "output", (16, 16, 16), {}),
        ),
        ((0, 1), (1, 2)),
    )
    assert mac_count(conv_s1) == 294912  # 16*16*3*3*8*16
    conv_s2 = OperatorGraph(
        (
            Operator(0, "input", (16, 16, 8), {}),
            Operator(1, "conv", (8, 8, 16), {"kernel": 3, "stride": 2, "c_in": 8, "c_out": 16}),
            Operator(2, "output", (8, 8, 16), {}),
        ),
        ((0, 1), (1, 2)),
    )
    assert mac_count(conv_s2) == 73728  # ceil rule gives an 8x8 output map
    dense = vector_chain(256, 10)
    assert mac_count(dense) == 2560


def test_formulas_match_template_walk_oracle(input_28):
    serial_cfg = SearchSpaceConfig(connection_options=("serial",))
    rng = random.Random(21)
    for _ in range(400):
        t = random_architecture(serial_cfg, input_28, rng)
        g = lower(t, input_28)
        params, macs = serial_template_counts(t, input_28)
        assert model_size(g) == params
        assert mac_count(g) == macs


def test_formulas_match_graph_walk_oracle(space_cfg, input_28):
    rng = random.Random(22)
    for _ in range(400):
        t = random_architecture(space_cfg, input_28, rng)
        g = lower(t, input_28)
        params, macs = graph_formula_counts(g)
        assert model_size(g) == params
        assert mac_count(g) == macs


def test_empty_compute_graph_profile():
    g = OperatorGraph(
        (Operator(0, "input", (9, 9, 3), {}), Operator(1, "output", (9, 9, 3), {})),
        ((0, 1),),
    )
    prof = profile(g)
    assert prof == profile(g)
    assert (prof.peak_memory_bytes, prof.model_size_bytes, prof.macs) == (243, 0, 0)


def test_graph_too_large_raises():
    g = vector_chain(*range(1, 70))
    with pytest.raises(GraphTooLarge):
        optimal_peak_memory(g, node_cap=64)
    with pytest.raises(GraphTooLarge):
        brute_force_peak_memory(vector_chain(*range(1, 14)))
