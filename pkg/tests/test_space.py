import math
import random
from dataclasses import replace

import pytest

from munas.arch import (
    FULL,
    ArchitectureTemplate,
    ConvBlock,
    ConvLayerSpec,
    InputSpec,
    validate,
)
from munas.errors import GenerationExhausted
from munas.graph import check_graph, lower
from munas.space import (
    APPEND_BLOCK,
    CHANGE_KERNEL,
    FLIP_CONV_KIND,
    INSERT_CONV_LAYER,
    INSERT_DENSE,
    REMOVE_BLOCK,
    REMOVE_CONV_LAYER,
    REMOVE_DENSE,
    Morphism,
    SearchSpaceConfig,
    apply_morphism,
    count_search_space,
    perturb_sparsity,
    random_architecture,
    random_morphism,
)


def degrees_of_freedom_diff(a: ArchitectureTemplate, b: ArchitectureTemplate) -> int:
    """Differing degrees of freedom, counting any insertion/removal as one."""
    if len(a.blocks) != len(b.blocks) or len(a.dense_layers) != len(b.dense_layers):
        return 1 if abs(len(a.blocks) - len(b.blocks)) + abs(
            len(a.dense_layers) - len(b.dense_layers)) == 1 else 99
    diff = 0
    for ba, bb in zip(a.blocks, b.blocks):
        if len(ba.layers) != len(bb.layers):
            return 1 if abs(len(ba.layers) - len(bb.layers)) == 1 and a.final_pool == b.final_pool else 99
        if ba.connection != bb.connection:
            diff += 1
        for la, lb in zip(ba.layers, bb.layers):
            if la.kind != lb.kind:
                diff += 1
                # a kind flip legitimately adds/removes the channel field
                if la.kernel != lb.kernel or la.stride != lb.stride:
                    diff += 1
            else:
                for field in ("kernel", "channels", "stride", "pre_pool", "batch_norm", "relu"):
                    if getattr(la, field) != getattr(lb, field):
                        diff += 1
    if a.final_pool != b.final_pool:
        diff += 1
    if a.pool_size != b.pool_size:
        diff += 1
    for ua, ub in zip(a.dense_layers, b.dense_layers):
        if ua != ub:
            diff += 1
    return diff


def test_random_architecture_seeded_determinism(space_cfg, input_28):
    a = random_architecture(space_cfg, input_28, random.Random(13))
    b = random_architecture(space_cfg, input_28, random.Random(13))
    assert a == b


def test_random_architecture_fuzz_all_valid_and_lowerable(space_cfg, input_28):
    rng = random.Random(99)
    for _ in range(10_000):
        t = random_architecture(space_cfg, input_28, rng)
        g = lower(t, input_28)  # validate passed inside the generator
        assert not check_graph(g)


def test_generation_exhausted_on_infeasible_config():
    cfg = SearchSpaceConfig(blocks_range=(6, 10), stride_options=(2,))
    with pytest.raises(GenerationExhausted):
        random_architecture(cfg, InputSpec(4, 4, 1, 2), random.Random(0))


def test_minimums_protected_from_removal(space_cfg, input_28, minimal_template):
    rng = random.Random(5)
    for _ in range(300):
        m, child = random_morphism(minimal_template, space_cfg, input_28, rng)
        assert m.kind not in (REMOVE_BLOCK, REMOVE_CONV_LAYER, REMOVE_DENSE)
        assert validate(child, input_28, space_cfg).ok


def test_kernel_never_leaves_options(space_cfg, input_28):
    t = ArchitectureTemplate(
        blocks=(ConvBlock("serial", (ConvLayerSpec("full", 7, 8, 1, False, False, True),)),),
        final_pool="avg", pool_size=2, dense_layers=(10,))
    rng = random.Random(11)
    for _ in range(300):
        m, child = random_morphism(t, space_cfg, input_28, rng)
        if m.kind == CHANGE_KERNEL:
            assert m.delta == -2
        assert validate(child, input_28, space_cfg).ok


def test_children_differ_in_exactly_one_degree_of_freedom(space_cfg, input_28):
    rng = random.Random(3)
    t = random_architecture(space_cfg, input_28, rng)
    for _ in range(1000):
        m, child = random_morphism(t, space_cfg, input_28, rng)
        assert child != t
        assert validate(child, input_28, space_cfg).ok
        assert degrees_of_freedom_diff(t, child) == 1, m


def test_morphism_closure_under_iteration(space_cfg, input_28):
    rng = random.Random(17)
    t = random_architecture(space_cfg, input_28, rng)
    for _ in range(300):
        _, t = random_morphism(t, space_cfg, input_28, rng)
        assert validate(t, input_28, space_cfg).ok


def test_morphism_seeded_determinism(space_cfg, input_28):
    t = random_architecture(space_cfg, input_28, random.Random(1))
    a = random_morphism(t, space_cfg, input_28, random.Random(42))
    b = random_morphism(t, space_cfg, input_28, random.Random(42))
    assert a == b


def test_reversibility_constructive(space_cfg, input_28):
    rng = random.Random(23)
    checked = set()
    for _ in range(600):
        t = random_architecture(space_cfg, input_28, rng)
        m, child = random_morphism(t, space_cfg, input_28, rng)
        inverse = _inverse_of(m, t)
        if inverse is None:
            continue  # removal of a non-terminal element is position-irrecoverable
        checked.add(m.kind)
        assert apply_morphism(child, inverse) == t, (m, inverse)
    # every reversible variant family must have been exercised
    assert {"toggle_pre_pool", "toggle_batch_norm", "toggle_relu", "change_kernel",
            "change_channels", "change_units", "flip_final_pool_kind",
            "append_block"} <= checked


def _inverse_of(m: Morphism, parent: ArchitectureTemplate) -> Morphism | None:
    if m.kind == APPEND_BLOCK:
        return Morphism(REMOVE_BLOCK, block=len(parent.blocks))
    if m.kind == REMOVE_BLOCK:
        if m.block == len(parent.blocks) - 1:
            return Morphism(APPEND_BLOCK, content=parent.blocks[m.block])
        return None
    if m.kind == INSERT_CONV_LAYER:
        return Morphism(REMOVE_CONV_LAYER, block=m.block, pos=m.pos)
    if m.kind == REMOVE_CONV_LAYER:
        return Morphism(INSERT_CONV_LAYER, block=m.block, pos=m.pos,
                        content=parent.blocks[m.block].layers[m.pos])
    if m.kind == INSERT_DENSE:
        return Morphism(REMOVE_DENSE, pos=m.pos)
    if m.kind == REMOVE_DENSE:
        return Morphism(INSERT_DENSE, pos=m.pos, content=parent.dense_layers[m.pos])
    if m.kind == FLIP_CONV_KIND:
        old = parent.blocks[m.block].layers[m.layer]
        return Morphism(FLIP_CONV_KIND, block=m.block, layer=m.layer,
                        content=old.channels if old.kind == FULL else None)
    if m.delta is not None:
        return replace(m, delta=-m.delta)
    return m  # toggles and flips are their own inverse


def test_perturb_sparsity_clips_and_bounds(space_cfg):
    rng = random.Random(0)
    hi = space_cfg.sparsity_range[1]
    for _ in range(200):
        assert perturb_sparsity(hi, space_cfg, rng) <= hi
    for _ in range(200):
        v = perturb_sparsity(0.5, space_cfg, rng)
        assert 0.45 <= v <= 0.55


def test_perturb_sparsity_is_symmetric(space_cfg):
    rng = random.Random(8)
    samples = [perturb_sparsity(0.5, space_cfg, rng) for _ in range(10_000)]
    assert abs(sum(samples) / len(samples) - 0.5) < 0.002


def _degenerate_cfg(**overrides):
    base = dict(
        blocks_range=(1, 1), layers_range=(1, 1), kernel_options=(3,),
        channels_range=(8, 8), stride_options=(1,), pool_size_options=(2,),
        dense_count_range=(1, 1), units_range=(10, 10),
        conv_kind_options=("full",), connection_options=("serial",),
        pool_kind_options=("avg",), pre_pool_options=(False,),
        batch_norm_options=(False,), relu_options=(True,),
    )
    base.update(overrides)
    return SearchSpaceConfig(**base)


def test_count_degenerate_space_is_one():
    assert count_search_space(_degenerate_cfg()) == 1


def test_count_two_binary_flags_is_four():
    cfg = _degenerate_cfg(batch_norm_options=(False, True), relu_options=(False, True))
    assert count_search_space(cfg) == 4


def test_count_matches_exhaustive_sampling_on_tiny_space():
    cfg = _degenerate_cfg(
        layers_range=(1, 2), channels_range=(1, 2), units_range=(10, 11),
        conv_kind_options=("full", "depthwise"), relu_options=(False, True),
    )
    # layers: full 2*2 + depthwise 2 = 6 options; blocks: 6 + 36; dense: 2
    expected = (6 + 36) * 2
    assert count_search_space(cfg) == expected
    rng = random.Random(4)
    seen = set()
    for _ in range(8000):
        seen.add(random_architecture(cfg, InputSpec(8, 8, 1, 2), rng))
    assert len(seen) == expected


def test_count_default_space_magnitude(space_cfg):
    n = count_search_space(space_cfg)
    assert n > 10 ** 120
    assert len(str(n)) == 127
