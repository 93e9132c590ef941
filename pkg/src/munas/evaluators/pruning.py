"""Structured pruning with dynamic masks and error feedback.

Masks select whole output channels (full convolutions) or units (hidden
dense layers) by L2 norm of the stored dense weights.  Forward passes use
masked weights while gradient updates keep flowing into the dense weights,
so pruned groups can recover before the final mask is taken.  The sparsity
target is approached along a cubic ramp over the configured epoch window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..arch import FULL, ArchitectureTemplate
from ..errors import LayerCollapsed
from ..graph import BATCH_NORM, CONV, DENSE
from .nn import BatchNormOp, GraphNet


@dataclass
class PrunableLayer:
    node_id: int
    origin: tuple
    op: object  # ConvOp or DenseOp
    bn_op: BatchNormOp | None
    group_count: int


def ramp_sparsity(target: float, progress: float) -> float:
    """Cubic schedule: fraction of groups masked at normalized progress."""
    tau = min(1.0, max(0.0, progress))
    return target * (1.0 - (1.0 - tau) ** 3)


def group_norms(weight: np.ndarray) -> np.ndarray:
    """L2 norm per output group (the last weight axis)."""
    axes = tuple(range(weight.ndim - 1))
    return np.sqrt((weight.astype(np.float64) ** 2).sum(axis=axes))


def top_group_mask(norms: np.ndarray, keep: int) -> np.ndarray:
    """Boolean mask keeping the `keep` largest groups; ties keep lower index."""
    order = np.argsort(-norms, kind="stable")
    mask = np.zeros(norms.shape[0], dtype=bool)
    mask[order[:keep]] = True
    return mask


class DpfController:
    """Owns the group masks of every prunable layer of a network."""

    def __init__(self, net: GraphNet, target_sparsity: float,
                 prune_start_epoch: float, prune_end_epoch: float):
        if not 0.0 <= target_sparsity < 1.0:
            raise ValueError("target sparsity must be in [0, 1)")
        self.target = target_sparsity
        self.start = prune_start_epoch
        self.end = prune_end_epoch
        self.layers: list[PrunableLayer] = []
        graph = net.graph
        bn_by_origin = {
            node.attrs.get("origin"): net.ops[node.id]
            for node in graph.nodes
            if node.kind == BATCH_NORM and node.attrs.get("origin") is not None
        }
        for node in graph.nodes:
            origin = node.attrs.get("origin")
            if origin is None:
                continue
            if node.kind == CONV and origin[0] == "block":
                self.layers.append(PrunableLayer(
                    node.id, origin, net.ops[node.id], bn_by_origin.get(origin),
                    node.attrs["c_out"]))
            elif node.kind == DENSE and origin[0] == "dense":
                self.layers.append(PrunableLayer(
                    node.id, origin, net.ops[node.id], None, node.attrs["out_units"]))

    def _progress(self, epoch_float: float) -> float:
        if self.end <= self.start:
            return 1.0 if epoch_float >= self.start else 0.0
        return (epoch_float - self.start) / (self.end - self.start)

    def current_sparsity(self, epoch_float: float) -> float:
        return ramp_sparsity(self.target, self._progress(epoch_float))

    def update(self, epoch_float: float) -> float:
        """Recompute every mask for the ramp sparsity at this point in training."""
        s = self.current_sparsity(epoch_float)
        self.apply_sparsity(s)
        return s

    def apply_sparsity(self, s: float):
        if self.target == 0.0:
            return
        for layer in self.layers:
            keep = math.ceil((1.0 - s) * layer.group_count)
            mask = top_group_mask(group_norms(layer.op.weight), keep)
            layer.op.mask = mask
            if layer.bn_op is not None:
                layer.bn_op.mask = mask

    def finalize(self):
        """Take the final mask exactly at the target sparsity."""
        self.apply_sparsity(self.target)

    def kept_counts(self) -> dict[tuple, int]:
        out = {}
        for layer in self.layers:
            mask = layer.op.mask
            out[layer.origin] = int(mask.sum()) if mask is not None else layer.group_count
        return out

    def achieved_sparsity(self) -> float:
        total = sum(layer.group_count for layer in self.layers)
        if total == 0:
            return 0.0
        kept = sum(self.kept_counts().values())
        return 1.0 - kept / total


def build_pruned_template(template: ArchitectureTemplate, kept: dict[tuple, int]) -> ArchitectureTemplate:
    """Structurally remove masked groups, shrinking channel and unit counts."""
    blocks = []
    for bi, block in enumerate(template.blocks):
        layers = []
        for li, layer in enumerate(block.layers):
            count = kept.get(("block", bi, li))
            if layer.kind == FULL and count is not None:
                if count == 0:
                    raise LayerCollapsed(f"block {bi} layer {li}: every channel pruned")
                layers.append(replace(layer, channels=count))
            else:
                layers.append(layer)
        blocks.append(replace(block, layers=tuple(layers)))
    dense = []
    for di, units in enumerate(template.dense_layers):
        count = kept.get(("dense", di))
        if count is not None:
            if count == 0:
                raise LayerCollapsed(f"dense layer {di}: every unit pruned")
            dense.append(count)
        else:
            dense.append(units)
    return replace(template, blocks=tuple(blocks), dense_layers=tuple(dense))
