import numpy as np
import pytest

from munas.arch import ArchitectureTemplate, ConvBlock, ConvLayerSpec, InputSpec
from munas.datasets import synthetic_blobs, synthetic_xor
from munas.errors import TrainDiverged
from munas.evaluators import AugmentConfig, OptimizerConfig, PruningConfig, TrainConfig
from munas.evaluators.micro import MicroEvaluator, quantized_size_report, train_micro
from munas.evaluators.nn import GraphNet, softmax_cross_entropy
from munas.evaluators.pruning import DpfController, group_norms, ramp_sparsity, top_group_mask
from munas.graph import lower
from munas.resources import model_size
from munas.space import SearchSpaceConfig, random_architecture

from .conftest import small_conv_template

GRAD_NAMES = {"weight": "grad_weight", "bias": "grad_bias",
              "gamma": "grad_gamma", "beta": "grad_beta"}


def train_cfg(epochs=6, lr=0.01, prune=(1, 4), seed=3, **kwargs):
    return TrainConfig(
        optimizer=OptimizerConfig("sgdw", ((0, lr),), momentum=0.9, weight_decay=4e-5),
        epochs=epochs,
        batch_size=32,
        pruning=PruningConfig(prune_start_epoch=prune[0], prune_end_epoch=prune[1]),
        augmentation=AugmentConfig(),
        seed=seed,
        **kwargs,
    )


def all_ops_template():
    """Exercises pre-pool, strided conv, depthwise, BN, ReLU, parallel add, both pools."""
    return ArchitectureTemplate(
        blocks=(
            ConvBlock("serial", (ConvLayerSpec("full", 3, 4, 2, True, True, True),)),
            ConvBlock("parallel", (ConvLayerSpec("depthwise", 3, None, 2, False, True, False),
                                   ConvLayerSpec("full", 1, 5, 1, False, False, True))),
        ),
        final_pool="avg",
        pool_size=2,
        dense_layers=(11,),
    )


def test_gradients_match_finite_differences():
    """Central differences in float64; guarded relative error below 1e-4."""
    g = lower(all_ops_template(), InputSpec(12, 12, 2, 3))
    rng = np.random.default_rng(0)
    net = GraphNet(g, rng, dtype=np.float64)
    x = rng.standard_normal((4, 12, 12, 2))
    y = rng.integers(0, 3, 4)

    def loss_of():
        return softmax_cross_entropy(net.forward(x, training=True), y)

    _, dlogits = loss_of()
    dx = net.backward(dlogits)
    eps = 1e-5
    for key, op, name, _ in net.parameter_slots():
        param = getattr(op, name)
        grad = getattr(op, GRAD_NAMES[name])
        flat, gflat = param.reshape(-1), grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = loss_of()
            flat[i] = orig - eps
            lm, _ = loss_of()
            flat[i] = orig
            num = (lp - lm) / (2 * eps)
            assert abs(num - gflat[i]) <= 1e-8 + 1e-4 * max(abs(num), abs(gflat[i])), key
    for _ in range(10):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        orig = x[idx]
        x[idx] = orig + eps
        lp, _ = loss_of()
        x[idx] = orig - eps
        lm, _ = loss_of()
        x[idx] = orig
        num = (lp - lm) / (2 * eps)
        assert abs(num - dx[idx]) <= 1e-8 + 1e-4 * max(abs(num), abs(dx[idx]))


def test_blob_task_reaches_95_percent():
    result = train_micro(small_conv_template(), 0.0, train_cfg(), synthetic_blobs(seed=1))
    assert result.val_accuracy >= 0.95


def test_xor_task_reaches_95_percent():
    cfg = train_cfg(epochs=30, lr=0.02, seed=5)
    result = train_micro(small_conv_template(), 0.0, cfg, synthetic_xor(seed=2))
    assert result.val_accuracy >= 0.95


def test_training_is_bit_deterministic():
    data = synthetic_blobs(seed=4)
    cfg = train_cfg()
    a = train_micro(small_conv_template(), 0.5, cfg, data)
    b = train_micro(small_conv_template(), 0.5, cfg, data)
    assert a.val_accuracy == b.val_accuracy
    assert a.test_accuracy == b.test_accuracy
    assert a.pruned_template == b.pruned_template
    assert a.achieved_sparsity == b.achieved_sparsity


def test_zero_sparsity_returns_identical_template():
    t = small_conv_template()
    result = train_micro(t, 0.0, train_cfg(epochs=1), synthetic_blobs(seed=1, n_train=64))
    assert result.pruned_template == t
    assert result.achieved_sparsity == 0.0


def test_epoch_losses_decrease():
    trace = {}
    train_micro(small_conv_template(), 0.0, train_cfg(), synthetic_blobs(seed=6), trace=trace)
    losses = trace["epoch_losses"]
    assert losses[5] < losses[0]


def test_cubic_ramp_values():
    assert ramp_sparsity(0.8, 0.0) == 0.0
    assert ramp_sparsity(0.8, 1.0) == 0.8
    assert ramp_sparsity(0.8, 0.5) == pytest.approx(0.8 * 0.875)
    assert ramp_sparsity(0.8, 2.0) == 0.8  # clamped past the window


def test_top_group_mask_breaks_ties_toward_lower_index():
    norms = np.array([1.0, 2.0, 2.0, 0.5])
    mask = top_group_mask(norms, 2)
    assert mask.tolist() == [False, True, True, False]
    mask = top_group_mask(np.array([1.0, 1.0, 1.0]), 2)
    assert mask.tolist() == [True, True, False]


def test_masks_select_top_groups_at_every_update():
    g = lower(small_conv_template(), InputSpec(8, 8, 1, 2))
    rng = np.random.default_rng(1)
    net = GraphNet(g, rng)
    controller = DpfController(net, 0.6, prune_start_epoch=0, prune_end_epoch=4)
    for epoch_float in (0.5, 1.5, 2.5, 4.0):
        s = controller.update(epoch_float)
        assert s == pytest.approx(controller.current_sparsity(epoch_float))
        for layer in controller.layers:
            keep = int(np.ceil((1.0 - s) * layer.group_count))
            mask = layer.op.mask
            assert int(mask.sum()) == keep
            norms = group_norms(layer.op.weight)
            kept_norms = norms[mask]
            dropped = norms[~mask]
            if dropped.size and kept_norms.size:
                assert kept_norms.min() >= dropped.max()
            if layer.bn_op is not None:
                assert (layer.bn_op.mask == mask).all()


def test_dense_weights_keep_values_in_masked_groups():
    data = synthetic_blobs(seed=3, n_train=128)
    g = lower(small_conv_template(), data.input)
    rng = np.random.default_rng(2)
    net = GraphNet(g, rng)
    controller = DpfController(net, 0.5, prune_start_epoch=0, prune_end_epoch=1)
    controller.update(1.0)
    from munas.evaluators.nn import SGDW

    opt = SGDW(momentum=0.9, weight_decay=0.0)
    slots = net.parameter_slots()
    x, y = data.train
    for step in range(10):
        logits = net.forward(x[:32], training=True)
        _, dlogits = softmax_cross_entropy(logits, y[:32])
        net.backward(dlogits)
        opt.step(slots, 0.01)
    for layer in controller.layers:
        mask = layer.op.mask
        masked_groups = np.where(~mask)[0]
        assert masked_groups.size > 0
        dense = layer.op.weight
        sliced = dense[..., masked_groups]
        assert np.abs(sliced).max() > 0  # error feedback keeps dense weights alive


def test_pruned_size_is_monotone_in_target():
    data = synthetic_blobs(seed=5, n_train=128)
    cfg = train_cfg(epochs=3, prune=(0, 2))
    sizes = []
    for target in (0.3, 0.7):
        result = train_micro(small_conv_template(), target, cfg, data)
        sizes.append(model_size(lower(result.pruned_template, data.input)))
    assert sizes[1] <= sizes[0]


def test_achieved_sparsity_within_one_group_per_layer():
    data = synthetic_blobs(seed=7, n_train=128)
    result = train_micro(small_conv_template(), 0.5, train_cfg(epochs=3, prune=(0, 2)), data)
    t = small_conv_template()
    groups = [l.channels for b in t.blocks for l in b.layers if l.kind == "full"]
    groups += list(t.dense_layers)
    pruned = result.pruned_template
    kept = [l.channels for b in pruned.blocks for l in b.layers if l.kind == "full"]
    kept += list(pruned.dense_layers)
    for g_total, g_kept in zip(groups, kept):
        expected = int(np.ceil(0.5 * g_total))  # ceil((1-s)*G) with s=0.5
        assert g_kept == expected
    assert result.achieved_sparsity == pytest.approx(1 - sum(kept) / sum(groups))


def test_divergence_is_reported():
    cfg = train_cfg(epochs=2, lr=1e9, seed=1)
    with pytest.raises(TrainDiverged):
        train_micro(small_conv_template(), 0.0, cfg, synthetic_blobs(seed=8, n_train=128))


def test_quantized_size_report_matches_analyzer():
    inp = InputSpec(12, 12, 1, 10)
    dense_only = ArchitectureTemplate(
        blocks=(ConvBlock("serial", (ConvLayerSpec("full", 1, 1, 1, False, False, False),)),),
        final_pool="avg", pool_size=2, dense_layers=(100,))
    g = lower(dense_only, inp)
    classifier = next(n for n in g.nodes if n.attrs.get("origin") == ("classifier",))
    assert classifier.attrs["in_units"] * 10 + 10 == 1010  # dense 100 -> 10
    import random

    rng = random.Random(12)
    cfg = SearchSpaceConfig()
    for _ in range(200):
        t = random_architecture(cfg, inp, rng)
        assert quantized_size_report(t, inp) == model_size(lower(t, inp))


def test_evaluator_wrapper_passes_sparsity_through():
    data = synthetic_blobs(seed=9, n_train=96)
    evaluator = MicroEvaluator(train_cfg(epochs=2, prune=(0, 1)), data)
    result = evaluator.evaluate(small_conv_template(), 0.4)
    assert 0.0 < result.achieved_sparsity <= 0.4 + 0.1
    assert result.train_seconds > 0
