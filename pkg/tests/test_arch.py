import random

import pytest

from munas.arch import (
    ArchitectureTemplate,
    ConvBlock,
    ConvLayerSpec,
    InputSpec,
    deserialize,
    serialize,
    validate,
)
from munas.errors import ParseError, ValidationError
from munas.graph import ADD, CONV, check_graph, lower
from munas.space import SearchSpaceConfig, random_architecture


def layer(kind="full", kernel=3, channels=8, stride=1, pre_pool=False, bn=False, relu=True):
    return ConvLayerSpec(kind, kernel, channels if kind == "full" else None,
                         stride, pre_pool, bn, relu)


def test_minimal_template_is_valid(minimal_template, input_28):
    assert validate(minimal_template, input_28).ok


def test_kernel_out_of_options_is_reported(minimal_template, input_28):
    bad = ArchitectureTemplate(
        blocks=(ConvBlock("serial", (layer(kernel=9),)),),
        final_pool="avg", pool_size=2, dense_layers=(10,))
    result = validate(bad, input_28)
    assert not result.ok
    assert any("kernel" in v for v in result.violations)


def test_spatial_underflow_is_reported():
    # 8 -> 4 -> 2 -> 1, the fourth stride-2 conv has nothing left to shrink
    blocks = tuple(
        ConvBlock("serial", (layer(stride=2),)) for _ in range(6)
    )
    bad = ArchitectureTemplate(blocks=blocks, final_pool="avg", pool_size=2, dense_layers=(10,))
    result = validate(bad, InputSpec(8, 8, 1, 2))
    assert not result.ok
    assert any("underflow" in v for v in result.violations)


def test_first_block_must_be_serial(input_28):
    bad = ArchitectureTemplate(
        blocks=(ConvBlock("parallel", (layer(),)),),
        final_pool="avg", pool_size=2, dense_layers=(10,))
    result = validate(bad, input_28)
    assert any("serial" in v for v in result.violations)


def test_lower_stride_two_shape(input_28):
    t = ArchitectureTemplate(
        blocks=(ConvBlock("serial", (layer(channels=4, stride=2),)),),
        final_pool="avg", pool_size=2, dense_layers=(10,))
    g = lower(t, input_28)
    conv = next(n for n in g.nodes if n.kind == CONV)
    assert conv.output_shape == (14, 14, 4)  # ceil(28/2)


def test_parallel_same_shape_lowers_to_single_add(input_28):
    t = ArchitectureTemplate(
        blocks=(
            ConvBlock("serial", (layer(channels=8),)),
            ConvBlock("parallel", (layer(channels=8),)),
        ),
        final_pool="avg", pool_size=2, dense_layers=(10,))
    g = lower(t, input_28)
    adds = [n for n in g.nodes if n.kind == ADD]
    assert len(adds) == 1
    shapes = [g.node(i).output_shape for i in g.inputs_of(adds[0].id)]
    assert shapes[0] == shapes[1]
    assert not check_graph(g)


def test_parallel_channel_mismatch_inserts_one_repair_conv(input_28):
    t = ArchitectureTemplate(
        blocks=(
            ConvBlock("serial", (layer(channels=8),)),
            ConvBlock("parallel", (layer(channels=16),)),
        ),
        final_pool="avg", pool_size=2, dense_layers=(10,))
    g = lower(t, input_28)
    repairs = [n for n in g.nodes
               if n.kind == CONV and n.attrs.get("origin", ())[0] == "repair"]
    assert len(repairs) == 1
    assert repairs[0].attrs["kernel"] == 1
    (add,) = (n for n in g.nodes if n.kind == ADD)
    shapes = [g.node(i).output_shape for i in g.inputs_of(add.id)]
    assert shapes[0] == shapes[1]
    assert not check_graph(g)


def test_lower_is_deterministic(space_cfg, input_28, rng):
    for _ in range(50):
        t = random_architecture(space_cfg, input_28, rng)
        assert lower(t, input_28) == lower(t, input_28)


def test_serialize_roundtrip_fuzz(space_cfg, input_28):
    rng = random.Random(7)
    for _ in range(1000):
        t = random_architecture(space_cfg, input_28, rng)
        assert deserialize(serialize(t)) == t


def test_deserialize_truncated_raises_parse_error(minimal_template):
    data = serialize(minimal_template)
    with pytest.raises(ParseError):
        deserialize(data[: len(data) // 2])


def test_deserialize_rejects_kernel_out_of_set(minimal_template):
    text = serialize(minimal_template).decode().replace('"kernel": 3', '"kernel": 4')
    with pytest.raises(ValidationError) as err:
        deserialize(text)
    assert "kernel" in str(err.value)


def test_deserialize_rejects_wrong_version(minimal_template):
    text = serialize(minimal_template).decode().replace("munas-arch/1", "munas-arch/9")
    with pytest.raises(ValidationError):
        deserialize(text)


def test_pruned_documents_with_small_units_still_parse(minimal_template):
    # structural parsing must accept sub-search-space unit counts
    text = serialize(minimal_template).decode().replace("[\n    10\n  ]", "[\n    2\n  ]")
    t = deserialize(text)
    assert t.dense_layers == (2,)
