"""Native micro-trainer: full training with gradual structured pruning.

Training runs on the float network built from the lowered graph.  The
reported validation accuracy is measured on the mask-applied network, which
computes the same function as the structurally pruned one for serial
templates (zeroed groups contribute nothing downstream).
"""

from __future__ import annotations

import math
import time

import numpy as np

from ..arch import ArchitectureTemplate, InputSpec
from ..datasets import DatasetSpec
from ..errors import TrainDiverged
from ..graph import lower
from ..resources import model_size
from . import AugmentConfig, EvalResult, TrainConfig, lr_at_epoch
from .nn import AdamW, GraphNet, SGDW, softmax_cross_entropy
from .pruning import DpfController, build_pruned_template


def _augment(x: np.ndarray, aug: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if aug.shift_pixels <= 0 and not aug.flip_lr:
        return x
    out = x
    if aug.flip_lr:
        flips = rng.random(x.shape[0]) < 0.5
        out = out.copy()
        out[flips] = out[flips, :, ::-1, :]
    if aug.shift_pixels > 0:
        s = aug.shift_pixels
        shifts = rng.integers(-s, s + 1, size=(x.shape[0], 2))
        padded = np.pad(out, ((0, 0), (s, s), (s, s), (0, 0)))
        h, w = x.shape[1], x.shape[2]
        shifted = np.empty_like(out)
        for i, (dy, dx) in enumerate(shifts):
            shifted[i] = padded[i, s + dy:s + dy + h, s + dx:s + dx + w, :]
        out = shifted
    return out


def _accuracy(net: GraphNet, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    correct = 0
    for b0 in range(0, len(x), batch_size):
        logits = net.forward(x[b0:b0 + batch_size], training=False)
        correct += int((logits.argmax(axis=1) == y[b0:b0 + batch_size]).sum())
    return correct / len(x)


def _make_optimizer(cfg: TrainConfig):
    opt = cfg.optimizer
    if opt.kind == "sgdw":
        return SGDW(opt.momentum, opt.weight_decay)
    if opt.kind == "adamw":
        return AdamW(opt.weight_decay)
    raise ValueError(f"unknown optimizer kind {opt.kind!r}")


def train_micro(
    template: ArchitectureTemplate,
    sparsity_target: float,
    cfg: TrainConfig,
    data: DatasetSpec,
    dtype=np.float32,
    trace: dict | None = None,
) -> EvalResult:
    start = time.perf_counter()
    graph = lower(template, data.input)
    rng = np.random.default_rng(cfg.seed)
    net = GraphNet(graph, rng, dtype=dtype, dropout_rate=cfg.dropout_rate)
    controller = DpfController(net, sparsity_target,
                               cfg.pruning.prune_start_epoch, cfg.pruning.prune_end_epoch)
    optimizer = _make_optimizer(cfg)
    slots = net.parameter_slots()

    x_train, y_train = data.train
    n = len(x_train)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    cadence = cfg.pruning.mask_update_every_steps or steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg.optimizer.lr_schedule, epoch)
        perm = rng.permutation(n)
        for b0 in range(0, n, cfg.batch_size):
            idx = perm[b0:b0 + cfg.batch_size]
            xb = _augment(x_train[idx], cfg.augmentation, rng)
            logits = net.forward(xb, training=True)
            loss, dlogits = softmax_cross_entropy(logits, y_train[idx])
            if not math.isfinite(loss):
                raise TrainDiverged(f"non-finite loss at epoch {epoch}")
            net.backward(dlogits)
            optimizer.step(slots, lr)
            step += 1
            if sparsity_target > 0.0 and step % cadence == 0:
                controller.update(step / steps_per_epoch)
    controller.finalize()

    x_val, y_val = data.val
    val_accuracy = _accuracy(net, x_val, y_val)
    test_accuracy = None
    if data.test is not None:
        test_accuracy = _accuracy(net, data.test[0], data.test[1])
    pruned = build_pruned_template(template, controller.kept_counts())
    return EvalResult(
        val_accuracy=val_accuracy,
        pruned_template=pruned,
        achieved_sparsity=controller.achieved_sparsity(),
        train_seconds=time.perf_counter() - start,
        test_accuracy=test_accuracy,
    )


def quantized_size_report(template: ArchitectureTemplate, input_spec: InputSpec) -> int:
    """Deployment size in bytes under 8-bit weights (delegates to the analyzer)."""
    return model_size(lower(template, input_spec))


class MicroEvaluator:
    def __init__(self, cfg: TrainConfig, data: DatasetSpec):
        self.cfg = cfg
        self.data = data

    def evaluate(self, template: ArchitectureTemplate, sparsity_target: float) -> EvalResult:
        return train_micro(template, sparsity_target, self.cfg, self.data)
