"""Numpy training engine for lowered operator graphs.

Layers use the same ceil-division/same-padding shape algebra as the resource
analyzers, so a trained network's shapes always agree with the static
profile.  Activations are NHWC.  All math supports float64 for gradient
checking.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..graph import (
    ADD,
    AVG_POOL,
    BATCH_NORM,
    CONV,
    DENSE,
    DEPTHWISE_CONV,
    INPUT,
    MAX_POOL,
    OUTPUT,
    RELU,
    OperatorGraph,
    ceil_div,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _same_pad(length: int, stride: int, kernel: int) -> tuple[int, int]:
    out = ceil_div(length, stride)
    total = max((out - 1) * stride + kernel - length, 0)
    lo = total // 2
    return lo, total - lo


def _init_weight(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = np.sqrt(1.0 / fan_in)
    w = rng.standard_normal(shape) * std
    return np.clip(w, -2.0 * std, 2.0 * std).astype(dtype)


class ConvOp:
    """Full convolution, same padding, output H = ceil(H_in / stride)."""

    def __init__(self, attrs: dict, rng: np.random.Generator, dtype):
        k, c_in, c_out = attrs["kernel"], attrs["c_in"], attrs["c_out"]
        self.kernel, self.stride = k, attrs["stride"]
        self.weight = _init_weight(rng, (k, k, c_in, c_out), k * k * c_in, dtype)
        self.bias = np.zeros(c_out, dtype=dtype)
        self.mask = None  # group mask over output channels
        self._cache = None

    def _effective(self):
        if self.mask is None:
            return self.weight, self.bias
        m = self.mask.astype(self.weight.dtype)
        return self.weight * m, self.bias * m

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        w, b = self._effective()
        k, s = self.kernel, self.stride
        batch, h, width, _ = x.shape
        pt, pb = _same_pad(h, s, k)
        pl, pr = _same_pad(width, s, k)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        h_out, w_out = ceil_div(h, s), ceil_div(width, s)
        s0, s1, s2, s3 = xp.strides
        windows = as_strided(
            xp,
            (batch, h_out, w_out, k, k, x.shape[3]),
            (s0, s * s1, s * s2, s1, s2, s3),
        )
        out = np.tensordot(windows, w, axes=([3, 4, 5], [0, 1, 2])) + b
        self._cache = (windows, xp.shape, (pt, pl), x.shape, w)
        return out

    def backward(self, dout: np.ndarray):
        windows, xp_shape, (pt, pl), x_shape, w = self._cache
        k, s = self.kernel, self.stride
        self.grad_weight = np.tensordot(windows, dout, axes=([0, 1, 2], [0, 1, 2]))
        self.grad_bias = dout.sum(axis=(0, 1, 2))
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        h_out, w_out = dout.shape[1], dout.shape[2]
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (h_out - 1) + 1:s, j:j + s * (w_out - 1) + 1:s, :] += np.tensordot(
                    dout, w[i, j], axes=([3], [1]))
        return dxp[:, pt:pt + x_shape[1], pl:pl + x_shape[2], :]

    def params(self):
        return {"weight": (self.weight, True), "bias": (self.bias, False)}


class DepthwiseConvOp:
    def __init__(self, attrs: dict, rng: np.random.Generator, dtype):
        k, c = attrs["kernel"], attrs["c_in"]
        self.kernel, self.stride = k, attrs["stride"]
        self.weight = _init_weight(rng, (k, k, c), k * k, dtype)
        self.bias = np.zeros(c, dtype=dtype)
        self.mask = None
        self._cache = None

    def _effective(self):
        if self.mask is None:
            return self.weight, self.bias
        m = self.mask.astype(self.weight.dtype)
        return self.weight * m, self.bias * m

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        w, b = self._effective()
        k, s = self.kernel, self.stride
        batch, h, width, c = x.shape
        pt, pb = _same_pad(h, s, k)
        pl, pr = _same_pad(width, s, k)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        h_out, w_out = ceil_div(h, s), ceil_div(width, s)
        s0, s1, s2, s3 = xp.strides
        windows = as_strided(xp, (batch, h_out, w_out, k, k, c), (s0, s * s1, s * s2, s1, s2, s3))
        out = np.einsum("bhwklc,klc->bhwc", windows, w) + b
        self._cache = (windows, xp.shape, (pt, pl), x.shape, w)
        return out

    def backward(self, dout: np.ndarray):
        windows, xp_shape, (pt, pl), x_shape, w = self._cache
        k, s = self.kernel, self.stride
        self.grad_weight = np.einsum("bhwklc,bhwc->klc", windows, dout)
        self.grad_bias = dout.sum(axis=(0, 1, 2))
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        h_out, w_out = dout.shape[1], dout.shape[2]
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (h_out - 1) + 1:s, j:j + s * (w_out - 1) + 1:s, :] += dout * w[i, j]
        return dxp[:, pt:pt + x_shape[1], pl:pl + x_shape[2], :]

    def params(self):
        return {"weight": (self.weight, True), "bias": (self.bias, False)}


class _PoolBase:
    """Non-overlapping pooling (stride == window) with ceil semantics."""

    def __init__(self, attrs: dict):
        self.size = attrs["size"]

    def _blocks(self, x: np.ndarray, pad_value: float):
        p = self.size
        batch, h, width, c = x.shape
        h_out, w_out = ceil_div(h, p), ceil_div(width, p)
        pt, pb = _same_pad(h, p, p)
        pl, pr = _same_pad(width, p, p)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=pad_value)
        blocks = xp.reshape(batch, h_out, p, w_out, p, c).transpose(0, 1, 3, 2, 4, 5)
        return blocks.reshape(batch, h_out, w_out, p * p, c), (pt, pl), (h, width)

    def _scatter(self, dblocks: np.ndarray, pads, hw):
        p = self.size
        pt, pl = pads
        h, width = hw
        batch, h_out, w_out, _, c = dblocks.shape
        dxp = dblocks.reshape(batch, h_out, w_out, p, p, c).transpose(0, 1, 3, 2, 4, 5)
        dxp = dxp.reshape(batch, h_out * p, w_out * p, c)
        return dxp[:, pt:pt + h, pl:pl + width, :]


class MaxPoolOp(_PoolBase):
    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        blocks, pads, hw = self._blocks(x, -np.inf)
        idx = blocks.argmax(axis=3)
        self._cache = (idx, blocks.shape, pads, hw, x.dtype)
        return np.take_along_axis(blocks, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(self, dout: np.ndarray):
        idx, blocks_shape, pads, hw, dtype = self._cache
        dblocks = np.zeros(blocks_shape, dtype=dout.dtype)
        np.put_along_axis(dblocks, idx[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
        return self._scatter(dblocks, pads, hw)

    def params(self):
        return {}


class AvgPoolOp(_PoolBase):
    """Average over the valid (non-padding) cells of each window."""

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        blocks, pads, hw = self._blocks(x, 0.0)
        ones = np.ones((1, x.shape[1], x.shape[2], 1), dtype=x.dtype)
        valid, _, _ = self._blocks(ones, 0.0)
        counts = valid.sum(axis=3, keepdims=True)  # (1, h_out, w_out, 1, 1)
        self._cache = (valid, counts, blocks.shape, pads, hw)
        return (blocks.sum(axis=3, keepdims=True) / counts)[:, :, :, 0, :]

    def backward(self, dout: np.ndarray):
        valid, counts, blocks_shape, pads, hw = self._cache
        dblocks = np.broadcast_to(
            dout[:, :, :, None, :] / counts, blocks_shape
        ) * valid
        return self._scatter(dblocks, pads, hw)

    def params(self):
        return {}


class BatchNormOp:
    def __init__(self, attrs: dict, dtype):
        c = attrs["channels"]
        self.gamma = np.ones(c, dtype=dtype)
        self.beta = np.zeros(c, dtype=dtype)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.mask = None
        self._cache = None

    def _effective(self):
        if self.mask is None:
            return self.gamma, self.beta
        m = self.mask.astype(self.gamma.dtype)
        return self.gamma * m, self.beta * m

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        gamma, beta = self._effective()
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mean).astype(
                self.running_mean.dtype)
            self.running_var = (BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var).astype(
                self.running_var.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, gamma, axes, x.shape)
        return gamma * xhat + beta

    def backward(self, dout: np.ndarray):
        xhat, inv_std, gamma, axes, x_shape = self._cache
        n = np.prod([x_shape[a] for a in axes])
        self.grad_gamma = (dout * xhat).sum(axis=axes)
        self.grad_beta = dout.sum(axis=axes)
        dxhat = dout * gamma
        dx = (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes) / n) * inv_std
        return dx

    def params(self):
        return {"gamma": (self.gamma, False), "beta": (self.beta, False)}


class ReluOp:
    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout: np.ndarray):
        return dout * self._mask

    def params(self):
        return {}


class AddOp:
    def forward(self, a: np.ndarray, b: np.ndarray, training: bool) -> np.ndarray:
        return a + b

    def backward(self, dout: np.ndarray):
        return dout, dout

    def params(self):
        return {}


class DenseOp:
    def __init__(self, attrs: dict, rng: np.random.Generator, dtype):
        u_in, u_out = attrs["in_units"], attrs["out_units"]
        self.weight = _init_weight(rng, (u_in, u_out), u_in, dtype)
        self.bias = np.zeros(u_out, dtype=dtype)
        self.mask = None  # group mask over output units
        self._cache = None

    def _effective(self):
        if self.mask is None:
            return self.weight, self.bias
        m = self.mask.astype(self.weight.dtype)
        return self.weight * m, self.bias * m

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        w, b = self._effective()
        flat = x.reshape(x.shape[0], -1)
        self._cache = (flat, x.shape, w)
        return flat @ w + b

    def backward(self, dout: np.ndarray):
        flat, x_shape, w = self._cache
        self.grad_weight = flat.T @ dout
        self.grad_bias = dout.sum(axis=0)
        return (dout @ w.T).reshape(x_shape)

    def params(self):
        return {"weight": (self.weight, True), "bias": (self.bias, False)}


_GRAD_NAMES = {"weight": "grad_weight", "bias": "grad_bias", "gamma": "grad_gamma", "beta": "grad_beta"}


class GraphNet:
    """Executable network built from a lowered operator graph."""

    def __init__(self, graph: OperatorGraph, rng: np.random.Generator, dtype=np.float32,
                 dropout_rate: float = 0.0):
        self.graph = graph
        self.dtype = dtype
        self.dropout_rate = dropout_rate
        self._rng = rng
        self.ops: dict[int, object] = {}
        input_id = graph.input_node().id
        output_id = graph.output_node().id
        self.comp_order = [n.id for n in graph.nodes if n.id not in (input_id, output_id)]
        self.input_id, self.output_id = input_id, output_id
        self.logits_id = graph.inputs_of(output_id)[0]
        for node in graph.nodes:
            if node.kind == CONV:
                self.ops[node.id] = ConvOp(node.attrs, rng, dtype)
            elif node.kind == DEPTHWISE_CONV:
                self.ops[node.id] = DepthwiseConvOp(node.attrs, rng, dtype)
            elif node.kind == MAX_POOL:
                self.ops[node.id] = MaxPoolOp(node.attrs)
            elif node.kind == AVG_POOL:
                self.ops[node.id] = AvgPoolOp(node.attrs)
            elif node.kind == BATCH_NORM:
                self.ops[node.id] = BatchNormOp(node.attrs, dtype)
            elif node.kind == RELU:
                self.ops[node.id] = ReluOp()
            elif node.kind == ADD:
                self.ops[node.id] = AddOp()
            elif node.kind == DENSE:
                self.ops[node.id] = DenseOp(node.attrs, rng, dtype)

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        values = {self.input_id: x.astype(self.dtype, copy=False)}
        self._dropout_masks: dict[int, np.ndarray] = {}
        for nid in self.comp_order:
            op = self.ops[nid]
            srcs = self.graph.inputs_of(nid)
            node = self.graph.node(nid)
            if node.kind == ADD:
                values[nid] = op.forward(values[srcs[0]], values[srcs[1]], training)
                continue
            value = values[srcs[0]]
            if (node.kind == DENSE and training and self.dropout_rate > 0.0
                    and node.attrs.get("origin", ())[:1] == ("dense",)):
                keep = 1.0 - self.dropout_rate
                mask = (self._rng.random(value.shape) < keep).astype(self.dtype) / keep
                self._dropout_masks[nid] = mask
                value = value * mask
            values[nid] = op.forward(value, training)
        return values[self.logits_id]

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        grads: dict[int, np.ndarray] = {self.logits_id: dlogits}
        for nid in reversed(self.comp_order):
            if nid not in grads:
                continue
            op = self.ops[nid]
            srcs = self.graph.inputs_of(nid)
            node = self.graph.node(nid)
            upstream = op.backward(grads.pop(nid))
            if node.kind == ADD:
                for src, d in zip(srcs, upstream):
                    _accumulate(grads, src, d)
            else:
                d = upstream
                mask = self._dropout_masks.get(nid)
                if mask is not None:
                    d = d * mask
                _accumulate(grads, srcs[0], d)
        return grads.get(self.input_id)

    def parameter_slots(self):
        """(key, op, param name, decayable) for every trainable array."""
        slots = []
        for nid in self.comp_order:
            op = self.ops[nid]
            for name, (_, decay) in op.params().items():
                slots.append((f"{nid}.{name}", op, name, decay))
        return slots


def _accumulate(grads: dict, key: int, value: np.ndarray):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean loss over the batch plus the logits gradient."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    eps = np.finfo(logits.dtype).tiny
    loss = -np.log(probs[np.arange(n), labels] + eps).mean()
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


class SGDW:
    """SGD with momentum and decoupled weight decay."""

    def __init__(self, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, slots, lr: float):
        for key, op, name, decay in slots:
            param = getattr(op, name)
            grad = getattr(op, _GRAD_NAMES[name])
            v = self._velocity.get(key)
            if v is None:
                v = np.zeros_like(param)
            v = self.momentum * v + grad
            self._velocity[key] = v
            param -= lr * v
            if decay and self.weight_decay:
                param -= lr * self.weight_decay * param


class AdamW:
    def __init__(self, weight_decay: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, slots, lr: float):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for key, op, name, decay in slots:
            param = getattr(op, name)
            grad = getattr(op, _GRAD_NAMES[name])
            m = self._m.get(key)
            if m is None:
                m = np.zeros_like(param)
                self._v[key] = np.zeros_like(param)
            v = self._v[key]
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            self._m[key], self._v[key] = m, v
            mhat = m / (1 - b1 ** self._t)
            vhat = v / (1 - b2 ** self._t)
            param -= lr * mhat / (np.sqrt(vhat) + self.eps)
            if decay and self.weight_decay:
                param -= lr * self.weight_decay * param
