"""Closed-form surrogate evaluator for testing the search loop.

Accuracy is a deterministic function of the sparsity-scaled candidate's MAC
and parameter counts, so searches driven by this evaluator are bit
reproducible and need no training data.
"""

from __future__ import annotations

import math
from dataclasses import replace

from ..arch import FULL, ArchitectureTemplate, InputSpec
from ..graph import lower
from ..objectives import BoundsConfig
from ..resources import mac_count, model_size
from . import EvalResult


def scale_template(template: ArchitectureTemplate, sparsity: float) -> ArchitectureTemplate:
    """Shrink channels and hidden units by (1 - sparsity), rounding up, min 1."""
    keep = 1.0 - sparsity

    def scaled(count: int) -> int:
        return max(1, math.ceil(count * keep))

    blocks = tuple(
        replace(
            block,
            layers=tuple(
                replace(layer, channels=scaled(layer.channels)) if layer.kind == FULL else layer
                for layer in block.layers
            ),
        )
        for block in template.blocks
    )
    dense = tuple(scaled(units) for units in template.dense_layers)
    return replace(template, blocks=blocks, dense_layers=dense)


def surrogate_accuracy(macs: int, size_bytes: int, bounds: BoundsConfig) -> float:
    value = 1.0 - math.exp(-macs / bounds.macs_bound - 0.3 * size_bytes / bounds.model_size_bound)
    return min(1.0, max(0.0, value))


def proxy_evaluate(
    template: ArchitectureTemplate,
    sparsity_target: float,
    bounds: BoundsConfig,
    input_spec: InputSpec,
) -> EvalResult:
    pruned = scale_template(template, sparsity_target)
    g = lower(pruned, input_spec)
    accuracy = surrogate_accuracy(mac_count(g), model_size(g), bounds)
    return EvalResult(
        val_accuracy=accuracy,
        pruned_template=pruned,
        achieved_sparsity=sparsity_target,
        train_seconds=0.0,
    )


class ProxyEvaluator:
    def __init__(self, bounds: BoundsConfig, input_spec: InputSpec):
        self.bounds = bounds
        self.input_spec = input_spec

    def evaluate(self, template: ArchitectureTemplate, sparsity_target: float) -> EvalResult:
        return proxy_evaluate(template, sparsity_target, self.bounds, self.input_spec)
