"""Random architecture generation and the morphism engine.

A morphism edits exactly one degree of freedom of a template.  Selection is
uniform over applicable morphism instances: each concrete (variant, location,
delta) tuple is weighted equally, and out-of-range results are rejected and
resampled rather than clamped.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace

from .arch import (
    AVG,
    DEPTHWISE,
    FULL,
    MAX,
    PARALLEL,
    SERIAL,
    ArchitectureTemplate,
    ConvBlock,
    ConvLayerSpec,
    InputSpec,
    TemplateLimits,
    validate,
)
from .errors import GenerationExhausted, NoApplicableMorphism

CHANNEL_DELTAS = (-5, -3, -1, 1, 3, 5)
UNIT_DELTAS = (-5, -3, -1, 1, 3, 5)
KERNEL_DELTAS = (-2, 2)
STRIDE_DELTAS = (-1, 1)
POOL_DELTAS = (-2, 2)
SPARSITY_PERTURBATION = 0.05

DEFAULT_GENERATION_RETRIES = 100
_CONTENT_RETRIES = 8


@dataclass(frozen=True)
class SearchSpaceConfig(TemplateLimits):
    sparsity_range: tuple[float, float] = (0.05, 0.80)


APPEND_BLOCK = "append_block"
REMOVE_BLOCK = "remove_block"
FLIP_CONNECTION = "flip_connection"
INSERT_CONV_LAYER = "insert_conv_layer"
REMOVE_CONV_LAYER = "remove_conv_layer"
TOGGLE_PRE_POOL = "toggle_pre_pool"
FLIP_CONV_KIND = "flip_conv_kind"
CHANGE_KERNEL = "change_kernel"
CHANGE_CHANNELS = "change_channels"
CHANGE_STRIDE = "change_stride"
TOGGLE_BATCH_NORM = "toggle_batch_norm"
TOGGLE_RELU = "toggle_relu"
FLIP_FINAL_POOL_KIND = "flip_final_pool_kind"
CHANGE_POOL_SIZE = "change_pool_size"
INSERT_DENSE = "insert_dense"
REMOVE_DENSE = "remove_dense"
CHANGE_UNITS = "change_units"

_CONTENT_KINDS = frozenset({APPEND_BLOCK, INSERT_CONV_LAYER, INSERT_DENSE, FLIP_CONV_KIND})


@dataclass(frozen=True)
class Morphism:
    """A fully materialized single-edit transformation (content included)."""

    kind: str
    block: int | None = None
    layer: int | None = None
    pos: int | None = None
    delta: int | None = None
    content: object = None

    def describe(self) -> str:
        parts = [self.kind]
        for label, value in (("block", self.block), ("layer", self.layer), ("pos", self.pos),
                             ("delta", self.delta)):
            if value is not None:
                parts.append(f"{label}={value}")
        return " ".join(parts)


def _random_layer(cfg: SearchSpaceConfig, rng: random.Random) -> ConvLayerSpec:
    kind = rng.choice(cfg.conv_kind_options)
    combos = [(k, s) for k in cfg.kernel_options for s in cfg.stride_options
              if not (k == 1 and s != 1)]
    if not combos:
        raise GenerationExhausted("no legal (kernel, stride) combination in config")
    kernel, stride = rng.choice(combos)
    channels = rng.randint(*cfg.channels_range) if kind == FULL else None
    return ConvLayerSpec(
        kind=kind,
        kernel=kernel,
        channels=channels,
        stride=stride,
        pre_pool=rng.choice(cfg.pre_pool_options),
        batch_norm=rng.choice(cfg.batch_norm_options),
        relu=rng.choice(cfg.relu_options),
    )


def _random_block(cfg: SearchSpaceConfig, rng: random.Random, first: bool) -> ConvBlock:
    connection = SERIAL if first else rng.choice(cfg.connection_options)
    n_layers = rng.randint(*cfg.layers_range)
    return ConvBlock(connection=connection, layers=tuple(_random_layer(cfg, rng) for _ in range(n_layers)))


def _random_template(cfg: SearchSpaceConfig, rng: random.Random) -> ArchitectureTemplate:
    n_blocks = rng.randint(*cfg.blocks_range)
    blocks = tuple(_random_block(cfg, rng, first=(i == 0)) for i in range(n_blocks))
    n_dense = rng.randint(*cfg.dense_count_range)
    return ArchitectureTemplate(
        blocks=blocks,
        final_pool=rng.choice(cfg.pool_kind_options),
        pool_size=rng.choice(cfg.pool_size_options),
        dense_layers=tuple(rng.randint(*cfg.units_range) for _ in range(n_dense)),
    )


def random_architecture(
    cfg: SearchSpaceConfig,
    input_spec: InputSpec,
    rng: random.Random,
    retries: int = DEFAULT_GENERATION_RETRIES,
) -> ArchitectureTemplate:
    """Draw every degree of freedom uniformly, resampling until validation passes."""
    for _ in range(retries):
        template = _random_template(cfg, rng)
        if validate(template, input_spec, cfg).ok:
            return template
    raise GenerationExhausted(
        f"no valid architecture after {retries} attempts; config/input pair may be infeasible")


def _replace_layer(t: ArchitectureTemplate, bi: int, li: int, layer: ConvLayerSpec) -> ArchitectureTemplate:
    block = t.blocks[bi]
    layers = block.layers[:li] + (layer,) + block.layers[li + 1:]
    blocks = t.blocks[:bi] + (replace(block, layers=layers),) + t.blocks[bi + 1:]
    return replace(t, blocks=blocks)


def apply_morphism(t: ArchitectureTemplate, m: Morphism) -> ArchitectureTemplate:
    """Deterministically apply a materialized morphism."""
    if m.kind == APPEND_BLOCK:
        return replace(t, blocks=t.blocks + (m.content,))
    if m.kind == REMOVE_BLOCK:
        return replace(t, blocks=t.blocks[:m.block] + t.blocks[m.block + 1:])
    if m.kind == FLIP_CONNECTION:
        block = t.blocks[m.block]
        flipped = replace(block, connection=PARALLEL if block.connection == SERIAL else SERIAL)
        return replace(t, blocks=t.blocks[:m.block] + (flipped,) + t.blocks[m.block + 1:])
    if m.kind == INSERT_CONV_LAYER:
        block = t.blocks[m.block]
        layers = block.layers[:m.pos] + (m.content,) + block.layers[m.pos:]
        return replace(t, blocks=t.blocks[:m.block] + (replace(block, layers=layers),) + t.blocks[m.block + 1:])
    if m.kind == REMOVE_CONV_LAYER:
        block = t.blocks[m.block]
        layers = block.layers[:m.pos] + block.layers[m.pos + 1:]
        return replace(t, blocks=t.blocks[:m.block] + (replace(block, layers=layers),) + t.blocks[m.block + 1:])
    if m.kind == TOGGLE_PRE_POOL:
        layer = t.blocks[m.block].layers[m.layer]
        return _replace_layer(t, m.block, m.layer, replace(layer, pre_pool=not layer.pre_pool))
    if m.kind == FLIP_CONV_KIND:
        layer = t.blocks[m.block].layers[m.layer]
        if layer.kind == FULL:
            new = replace(layer, kind=DEPTHWISE, channels=None, stride=layer.stride)
        else:
            new = replace(layer, kind=FULL, channels=m.content)
        return _replace_layer(t, m.block, m.layer, new)
    if m.kind == CHANGE_KERNEL:
        layer = t.blocks[m.block].layers[m.layer]
        return _replace_layer(t, m.block, m.layer, replace(layer, kernel=layer.kernel + m.delta))
    if m.kind == CHANGE_CHANNELS:
        layer = t.blocks[m.block].layers[m.layer]
        return _replace_layer(t, m.block, m.layer, replace(layer, channels=layer.channels + m.delta))
    if m.kind == CHANGE_STRIDE:
        layer = t.blocks[m.block].layers[m.layer]
        return _replace_layer(t, m.block, m.layer, replace(layer, stride=layer.stride + m.delta))
    if m.kind == TOGGLE_BATCH_NORM:
        layer = t.blocks[m.block].layers[m.layer]
        return _replace_layer(t, m.block, m.layer, replace(layer, batch_norm=not layer.batch_norm))
    if m.kind == TOGGLE_RELU:
        layer = t.blocks[m.block].layers[m.layer]
        return _replace_layer(t, m.block, m.layer, replace(layer, relu=not layer.relu))
    if m.kind == FLIP_FINAL_POOL_KIND:
        return replace(t, final_pool=MAX if t.final_pool == AVG else AVG)
    if m.kind == CHANGE_POOL_SIZE:
        return replace(t, pool_size=t.pool_size + m.delta)
    if m.kind == INSERT_DENSE:
        dense = t.dense_layers[:m.pos] + (m.content,) + t.dense_layers[m.pos:]
        return replace(t, dense_layers=dense)
    if m.kind == REMOVE_DENSE:
        dense = t.dense_layers[:m.pos] + t.dense_layers[m.pos + 1:]
        return replace(t, dense_layers=dense)
    if m.kind == CHANGE_UNITS:
        dense = list(t.dense_layers)
        dense[m.pos] += m.delta
        return replace(t, dense_layers=tuple(dense))
    raise ValueError(f"unknown morphism kind {m.kind!r}")


def _enumerate_instances(t: ArchitectureTemplate, cfg: SearchSpaceConfig) -> list[Morphism]:
    """Structurally plausible instances; content left for materialization."""
    out: list[Morphism] = []
    n = len(t.blocks)
    if n < cfg.blocks_range[1]:
        out.append(Morphism(APPEND_BLOCK))
    if n > cfg.blocks_range[0]:
        out.extend(Morphism(REMOVE_BLOCK, block=bi) for bi in range(n))
    if len(cfg.connection_options) > 1:
        out.extend(Morphism(FLIP_CONNECTION, block=bi) for bi in range(1, n))
    for bi, block in enumerate(t.blocks):
        m_count = len(block.layers)
        if m_count < cfg.layers_range[1]:
            out.extend(Morphism(INSERT_CONV_LAYER, block=bi, pos=p) for p in range(m_count + 1))
        if m_count > cfg.layers_range[0]:
            out.extend(Morphism(REMOVE_CONV_LAYER, block=bi, pos=p) for p in range(m_count))
        for li, layer in enumerate(block.layers):
            if len(cfg.pre_pool_options) > 1:
                out.append(Morphism(TOGGLE_PRE_POOL, block=bi, layer=li))
            if len(cfg.conv_kind_options) > 1:
                out.append(Morphism(FLIP_CONV_KIND, block=bi, layer=li))
            for d in KERNEL_DELTAS:
                if layer.kernel + d in cfg.kernel_options:
                    out.append(Morphism(CHANGE_KERNEL, block=bi, layer=li, delta=d))
            if layer.kind == FULL:
                for d in CHANNEL_DELTAS:
                    if cfg.channels_range[0] <= layer.channels + d <= cfg.channels_range[1]:
                        out.append(Morphism(CHANGE_CHANNELS, block=bi, layer=li, delta=d))
            for d in STRIDE_DELTAS:
                if layer.stride + d in cfg.stride_options:
                    out.append(Morphism(CHANGE_STRIDE, block=bi, layer=li, delta=d))
            if len(cfg.batch_norm_options) > 1:
                out.append(Morphism(TOGGLE_BATCH_NORM, block=bi, layer=li))
            if len(cfg.relu_options) > 1:
                out.append(Morphism(TOGGLE_RELU, block=bi, layer=li))
    if len(cfg.pool_kind_options) > 1:
        out.append(Morphism(FLIP_FINAL_POOL_KIND))
    for d in POOL_DELTAS:
        if t.pool_size + d in cfg.pool_size_options:
            out.append(Morphism(CHANGE_POOL_SIZE, delta=d))
    f_count = len(t.dense_layers)
    if f_count < cfg.dense_count_range[1]:
        out.extend(Morphism(INSERT_DENSE, pos=p) for p in range(f_count + 1))
    if f_count > cfg.dense_count_range[0]:
        out.extend(Morphism(REMOVE_DENSE, pos=p) for p in range(f_count))
    for pos, units in enumerate(t.dense_layers):
        for d in UNIT_DELTAS:
            if cfg.units_range[0] <= units + d <= cfg.units_range[1]:
                out.append(Morphism(CHANGE_UNITS, pos=pos, delta=d))
    return out


def _materialize(inst: Morphism, t: ArchitectureTemplate, cfg: SearchSpaceConfig,
                 rng: random.Random) -> Morphism:
    if inst.kind == APPEND_BLOCK:
        return replace(inst, content=_random_block(cfg, rng, first=False))
    if inst.kind == INSERT_CONV_LAYER:
        return replace(inst, content=_random_layer(cfg, rng))
    if inst.kind == INSERT_DENSE:
        return replace(inst, content=rng.randint(*cfg.units_range))
    if inst.kind == FLIP_CONV_KIND:
        layer = t.blocks[inst.block].layers[inst.layer]
        if layer.kind == DEPTHWISE:
            return replace(inst, content=rng.randint(*cfg.channels_range))
        return inst
    return inst


def random_morphism(
    t: ArchitectureTemplate,
    cfg: SearchSpaceConfig,
    input_spec: InputSpec,
    rng: random.Random,
) -> tuple[Morphism, ArchitectureTemplate]:
    """Uniformly pick an applicable morphism instance; returns (morphism, child).

    Rejection sampling without replacement over the instance set keeps the
    distribution uniform over instances whose child validates.
    """
    pool = _enumerate_instances(t, cfg)
    while pool:
        inst = pool.pop(rng.randrange(len(pool)))
        tries = _CONTENT_RETRIES if inst.kind in _CONTENT_KINDS else 1
        for _ in range(tries):
            m = _materialize(inst, t, cfg, rng)
            child = apply_morphism(t, m)
            if child != t and validate(child, input_spec, cfg).ok:
                return m, child
    raise NoApplicableMorphism("no morphism instance yields a valid child")


def perturb_sparsity(s: float, cfg: SearchSpaceConfig, rng: random.Random) -> float:
    """Add Uniform[-0.05, +0.05] noise, clipped to the configured range."""
    lo, hi = cfg.sparsity_range
    return min(hi, max(lo, s + rng.uniform(-SPARSITY_PERTURBATION, SPARSITY_PERTURBATION)))


def count_search_space(cfg: SearchSpaceConfig, input_spec: InputSpec | None = None) -> int:
    """Exact count of distinct templates under the config.

    Counting convention: pure combinatorics over the genotype's degrees of
    freedom.  Structural invariants are honored (the first block is serial, a
    1x1 convolution has stride 1, depthwise layers carry no channel count) but
    lowering validity for a concrete input is ignored, so the count is
    input-independent.
    """
    ks_combos = sum(
        1 for k in cfg.kernel_options for s in cfg.stride_options if not (k == 1 and s != 1)
    )
    flags = len(cfg.pre_pool_options) * len(cfg.batch_norm_options) * len(cfg.relu_options)
    c_lo, c_hi = cfg.channels_range
    channel_options = c_hi - c_lo + 1
    layer_options = 0
    if FULL in cfg.conv_kind_options:
        layer_options += ks_combos * channel_options * flags
    if DEPTHWISE in cfg.conv_kind_options:
        layer_options += ks_combos * flags
    m_lo, m_hi = cfg.layers_range
    block_content = sum(layer_options ** m for m in range(m_lo, m_hi + 1))
    first_block = block_content
    later_block = len(cfg.connection_options) * block_content
    n_lo, n_hi = cfg.blocks_range
    conv_part = sum(first_block * later_block ** (n - 1) for n in range(n_lo, n_hi + 1))
    pool_part = len(cfg.pool_kind_options) * len(cfg.pool_size_options)
    u_lo, u_hi = cfg.units_range
    unit_options = u_hi - u_lo + 1
    f_lo, f_hi = cfg.dense_count_range
    dense_part = sum(unit_options ** f for f in range(f_lo, f_hi + 1))
    return conv_part * pool_part * dense_part
