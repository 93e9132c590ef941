"""Architecture genotype: convolutional block templates, validation, serialization.

A template is the unit of mutation in the search.  It is lowered to a concrete
operator graph (see :mod:`munas.graph`) before any resource analysis happens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ParseError, ValidationError

ARCH_FORMAT_VERSION = "munas-arch/1"

FULL = "full"
DEPTHWISE = "depthwise"
SERIAL = "serial"
PARALLEL = "parallel"
AVG = "avg"
MAX = "max"

# Hard bounds of the genotype encoding.  Searches may narrow these via
# SearchSpaceConfig but never widen them.
KERNEL_OPTIONS = (1, 3, 5, 7)
STRIDE_OPTIONS = (1, 2)
CHANNELS_RANGE = (1, 128)
BLOCKS_RANGE = (1, 10)
LAYERS_RANGE = (1, 3)
POOL_SIZE_OPTIONS = (2, 4, 6)
DENSE_COUNT_RANGE = (1, 3)
UNITS_RANGE = (10, 256)


@dataclass(frozen=True)
class ConvLayerSpec:
    """One convolution layer of a block, with its optional pre/post operators."""

    kind: str  # FULL or DEPTHWISE
    kernel: int
    channels: int | None  # present only for FULL
    stride: int
    pre_pool: bool
    batch_norm: bool
    relu: bool


@dataclass(frozen=True)
class ConvBlock:
    connection: str  # SERIAL or PARALLEL
    layers: tuple[ConvLayerSpec, ...]


@dataclass(frozen=True)
class ArchitectureTemplate:
    blocks: tuple[ConvBlock, ...]
    final_pool: str  # AVG or MAX
    pool_size: int
    dense_layers: tuple[int, ...]  # hidden layer units; classifier layer is implicit


@dataclass(frozen=True)
class InputSpec:
    height: int
    width: int
    channels: int
    num_classes: int


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def structural_violations(template: ArchitectureTemplate) -> list[str]:
    """Invariants every representable architecture must satisfy.

    These hold for pruned networks too, where channel/unit counts may fall
    below the search-space minimums.
    """
    out: list[str] = []
    if not template.blocks:
        out.append("blocks: at least one block required")
    for bi, block in enumerate(template.blocks):
        if block.connection not in (SERIAL, PARALLEL):
            out.append(f"block {bi}: connection '{block.connection}' not in {{serial, parallel}}")
        if bi == 0 and block.connection == PARALLEL:
            out.append("block 0: first block must be serial")
        if not block.layers:
            out.append(f"block {bi}: at least one conv layer required")
        for li, layer in enumerate(block.layers):
            where = f"block {bi} layer {li}"
            if layer.kind not in (FULL, DEPTHWISE):
                out.append(f"{where}: kind '{layer.kind}' not in {{full, depthwise}}")
            if layer.kernel not in KERNEL_OPTIONS:
                out.append(f"{where}: kernel {layer.kernel} not in {set(KERNEL_OPTIONS)}")
            if layer.stride not in STRIDE_OPTIONS:
                out.append(f"{where}: stride {layer.stride} not in {set(STRIDE_OPTIONS)}")
            if layer.kernel == 1 and layer.stride != 1:
                out.append(f"{where}: stride must be 1 for a 1x1 convolution")
            if layer.kind == DEPTHWISE and layer.channels is not None:
                out.append(f"{where}: channels must be absent for depthwise convolution")
            if layer.kind == FULL:
                if layer.channels is None:
                    out.append(f"{where}: channels required for full convolution")
                elif layer.channels < 1:
                    out.append(f"{where}: channels {layer.channels} < 1")
    if template.final_pool not in (AVG, MAX):
        out.append(f"final_pool '{template.final_pool}' not in {{avg, max}}")
    if template.pool_size not in POOL_SIZE_OPTIONS:
        out.append(f"pool_size {template.pool_size} not in {set(POOL_SIZE_OPTIONS)}")
    if not template.dense_layers:
        out.append("dense_layers: at least one hidden dense layer required")
    for di, units in enumerate(template.dense_layers):
        if units < 1:
            out.append(f"dense layer {di}: units {units} < 1")
    return out


def range_violations(template: ArchitectureTemplate, limits=None) -> list[str]:
    """Search-space bound checks (the configurable genotype ranges)."""
    lim = limits if limits is not None else _TABLE_LIMITS
    out: list[str] = []
    n = len(template.blocks)
    if not lim.blocks_range[0] <= n <= lim.blocks_range[1]:
        out.append(f"block count {n} outside {list(lim.blocks_range)}")
    for bi, block in enumerate(template.blocks):
        m = len(block.layers)
        if not lim.layers_range[0] <= m <= lim.layers_range[1]:
            out.append(f"block {bi}: layer count {m} outside {list(lim.layers_range)}")
        if bi > 0 and block.connection not in lim.connection_options:
            out.append(f"block {bi}: connection '{block.connection}' not allowed")
        for li, layer in enumerate(block.layers):
            where = f"block {bi} layer {li}"
            if layer.kind not in lim.conv_kind_options:
                out.append(f"{where}: kind '{layer.kind}' not allowed")
            if layer.kernel not in lim.kernel_options:
                out.append(f"{where}: kernel {layer.kernel} not in {sorted(lim.kernel_options)}")
            if layer.stride not in lim.stride_options:
                out.append(f"{where}: stride {layer.stride} not in {sorted(lim.stride_options)}")
            if layer.pre_pool not in lim.pre_pool_options:
                out.append(f"{where}: pre_pool {layer.pre_pool} not allowed")
            if layer.batch_norm not in lim.batch_norm_options:
                out.append(f"{where}: batch_norm {layer.batch_norm} not allowed")
            if layer.relu not in lim.relu_options:
                out.append(f"{where}: relu {layer.relu} not allowed")
            if layer.kind == FULL and layer.channels is not None:
                lo, hi = lim.channels_range
                if not lo <= layer.channels <= hi:
                    out.append(f"{where}: channels {layer.channels} outside [{lo}, {hi}]")
    if template.final_pool not in lim.pool_kind_options:
        out.append(f"final_pool '{template.final_pool}' not allowed")
    if template.pool_size not in lim.pool_size_options:
        out.append(f"pool_size {template.pool_size} not in {sorted(lim.pool_size_options)}")
    f = len(template.dense_layers)
    if not lim.dense_count_range[0] <= f <= lim.dense_count_range[1]:
        out.append(f"dense layer count {f} outside {list(lim.dense_count_range)}")
    for di, units in enumerate(template.dense_layers):
        lo, hi = lim.units_range
        if not lo <= units <= hi:
            out.append(f"dense layer {di}: units {units} outside [{lo}, {hi}]")
    return out


@dataclass(frozen=True)
class TemplateLimits:
    kernel_options: tuple[int, ...] = KERNEL_OPTIONS
    stride_options: tuple[int, ...] = STRIDE_OPTIONS
    channels_range: tuple[int, int] = CHANNELS_RANGE
    blocks_range: tuple[int, int] = BLOCKS_RANGE
    layers_range: tuple[int, int] = LAYERS_RANGE
    pool_size_options: tuple[int, ...] = POOL_SIZE_OPTIONS
    dense_count_range: tuple[int, int] = DENSE_COUNT_RANGE
    units_range: tuple[int, int] = UNITS_RANGE
    # Option sets for the discrete flags; narrowing one below two entries
    # freezes that degree of freedom.
    conv_kind_options: tuple[str, ...] = (FULL, DEPTHWISE)
    connection_options: tuple[str, ...] = (SERIAL, PARALLEL)
    pool_kind_options: tuple[str, ...] = (AVG, MAX)
    pre_pool_options: tuple[bool, ...] = (False, True)
    batch_norm_options: tuple[bool, ...] = (False, True)
    relu_options: tuple[bool, ...] = (False, True)


_TABLE_LIMITS = TemplateLimits()


def validate(template: ArchitectureTemplate, input_spec: InputSpec, limits=None) -> ValidationResult:
    """Check structure, genotype bounds, and lowerability.

    Violations are returned, never raised.
    """
    out = structural_violations(template)
    out.extend(range_violations(template, limits))
    if not out:
        out.extend(_lowering_violations(template, input_spec))
    return ValidationResult(tuple(out))


def validate_structure(template: ArchitectureTemplate, input_spec: InputSpec) -> ValidationResult:
    """Structural validity plus lowerability, without genotype range caps.

    This is the check pruned architectures must pass.
    """
    out = structural_violations(template)
    if not out:
        out.extend(_lowering_violations(template, input_spec))
    return ValidationResult(tuple(out))


def _lowering_violations(template: ArchitectureTemplate, input_spec: InputSpec) -> list[str]:
    from .graph import LoweringError, lower  # local import avoids a cycle

    try:
        lower(template, input_spec)
    except LoweringError as exc:
        return [str(exc)]
    return []


# --- canonical document encoding (munas-arch/1) ---


def _layer_to_obj(layer: ConvLayerSpec) -> dict:
    obj = {
        "kind": layer.kind,
        "kernel": layer.kernel,
        "stride": layer.stride,
        "pre_pool": layer.pre_pool,
        "batch_norm": layer.batch_norm,
        "relu": layer.relu,
    }
    if layer.kind == FULL:
        obj["channels"] = layer.channels
    return obj


def template_to_obj(template: ArchitectureTemplate) -> dict:
    return {
        "version": ARCH_FORMAT_VERSION,
        "blocks": [
            {"connection": b.connection, "layers": [_layer_to_obj(l) for l in b.layers]}
            for b in template.blocks
        ],
        "final_pool": template.final_pool,
        "pool_size": template.pool_size,
        "dense_layers": list(template.dense_layers),
    }


def serialize(template: ArchitectureTemplate) -> bytes:
    """Canonical text encoding of a template (stable byte-for-byte)."""
    return (json.dumps(template_to_obj(template), indent=2) + "\n").encode("utf-8")


def _expect(obj: dict, key: str, types, where: str):
    if key not in obj:
        raise ValidationError(f"{where}: missing field '{key}'", field=key)
    value = obj[key]
    if not isinstance(value, types) or isinstance(value, bool) and types is int:
        raise ValidationError(f"{where}: field '{key}' has wrong type", field=key)
    return value


def _layer_from_obj(obj: dict, where: str) -> ConvLayerSpec:
    kind = _expect(obj, "kind", str, where)
    channels = obj.get("channels")
    if channels is not None and not isinstance(channels, int):
        raise ValidationError(f"{where}: field 'channels' has wrong type", field="channels")
    return ConvLayerSpec(
        kind=kind,
        kernel=_expect(obj, "kernel", int, where),
        channels=channels,
        stride=_expect(obj, "stride", int, where),
        pre_pool=_expect(obj, "pre_pool", bool, where),
        batch_norm=_expect(obj, "batch_norm", bool, where),
        relu=_expect(obj, "relu", bool, where),
    )


def template_from_obj(obj: dict) -> ArchitectureTemplate:
    if not isinstance(obj, dict):
        raise ValidationError("architecture document must be an object")
    version = obj.get("version")
    if version != ARCH_FORMAT_VERSION:
        raise ValidationError(f"unsupported architecture version {version!r}", field="version")
    raw_blocks = _expect(obj, "blocks", list, "document")
    blocks = []
    for bi, raw_block in enumerate(raw_blocks):
        if not isinstance(raw_block, dict):
            raise ValidationError(f"block {bi}: must be an object")
        raw_layers = _expect(raw_block, "layers", list, f"block {bi}")
        layers = tuple(
            _layer_from_obj(raw, f"block {bi} layer {li}")
            for li, raw in enumerate(raw_layers)
            if isinstance(raw, dict) or _bad_layer(bi, li)
        )
        blocks.append(ConvBlock(connection=_expect(raw_block, "connection", str, f"block {bi}"), layers=layers))
    dense = _expect(obj, "dense_layers", list, "document")
    for di, units in enumerate(dense):
        if not isinstance(units, int) or isinstance(units, bool):
            raise ValidationError(f"dense layer {di}: units must be an integer", field="dense_layers")
    template = ArchitectureTemplate(
        blocks=tuple(blocks),
        final_pool=_expect(obj, "final_pool", str, "document"),
        pool_size=_expect(obj, "pool_size", int, "document"),
        dense_layers=tuple(dense),
    )
    problems = structural_violations(template)
    if problems:
        raise ValidationError(problems[0])
    return template


def _bad_layer(bi: int, li: int):
    raise ValidationError(f"block {bi} layer {li}: must be an object")


def deserialize(data: bytes | str) -> ArchitectureTemplate:
    """Parse a canonical document; raises ParseError/ValidationError."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed architecture document: {exc.msg}", position=exc.pos) from exc
    return template_from_obj(obj)
