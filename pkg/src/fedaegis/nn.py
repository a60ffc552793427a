"""Minimal dense-network kernel with analytic gradients.

Backs both the federated task classifiers and the query/key encoders of the
adaptive aggregator. No autodiff graph: each op exposes a forward pass that
records the values its hand-written backward pass needs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError
from .params import LayeredVector

_ACTIVATIONS = ("relu", "none")


@dataclass
class Dense:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "none"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise SchemaError("dense layer weight/bias shapes are inconsistent")
        if self.activation not in _ACTIVATIONS:
            raise SchemaError(f"unknown activation {self.activation!r}")


class Mlp:
    """A chain of dense layers, each optionally followed by ReLU."""

    def __init__(self, layers):
        self.layers = list(layers)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.w.shape[1] != prev.w.shape[0]:
                raise SchemaError("consecutive layer dimensions do not chain")

    @classmethod
    def create(cls, dims, rng, hidden_activation="relu"):
        """Glorot-uniform initialized network with ReLU on all but the last layer."""
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-limit, limit, size=(d_out, d_in))
            act = hidden_activation if i < len(dims) - 2 else "none"
            layers.append(Dense(w, np.zeros(d_out), act))
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].w.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].w.shape[0]

    def parameters(self):
        """Flat list [w0, b0, w1, b1, ...]; arrays are shared, not copied."""
        out = []
        for layer in self.layers:
            out.extend((layer.w, layer.b))
        return out

    def copy(self):
        return Mlp([Dense(l.w.copy(), l.b.copy(), l.activation) for l in self.layers])

    def forward(self, x):
        """Apply the network to a vector or an (batch, input_dim) matrix."""
        y, _ = self.forward_cache(x)
        return y

    def forward_cache(self, x):
        """Forward pass that also returns the per-layer inputs and pre-activations."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise SchemaError(
                f"input width {x.shape[-1]} does not match network input {self.input_dim}"
            )
        cache = []
        h = x
        for layer in self.layers:
            z = h @ layer.w.T + layer.b
            cache.append((h, z))
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        return h, cache

    def backward(self, cache, grad_out):
        """Gradients of a scalar loss given d(loss)/d(output).

        Returns (param_grads, input_grad) where param_grads matches
        parameters() ordering. Batched inputs sum the parameter gradients
        over the batch.
        """
        grad = np.asarray(grad_out, dtype=np.float64)
        param_grads = [None] * (2 * len(self.layers))
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            h_in, z = cache[idx]
            if grad.shape != z.shape:
                raise SchemaError("upstream gradient shape mismatch")
            if layer.activation == "relu":
                grad = grad * (z > 0)
            if grad.ndim == 1:
                gw = np.outer(grad, h_in)
                gb = grad.copy()
            else:
                gw = grad.T @ h_in
                gb = grad.sum(axis=0)
            param_grads[2 * idx] = gw
            param_grads[2 * idx + 1] = gb
            grad = grad @ layer.w
        return param_grads, grad


def scaled_softmax(scores, c):
    """Softmax of c * scores, computed with max subtraction; weights sum to 1."""
    z = c * np.asarray(scores, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_softmax_backward(weights, grad_w, c):
    """d(loss)/d(scores) given softmax weights and d(loss)/d(weights)."""
    inner = (grad_w * weights).sum(axis=-1, keepdims=True)
    return c * weights * (grad_w - inner)


def l1_loss(pred, target):
    """Mean absolute error and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over a batch of logits and integer labels.

    Returns (loss, gradient w.r.t. logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-np.log(np.maximum(probs[idx, labels], 1e-300)).mean())
    grad = probs.copy()
    grad[idx, labels] -= 1.0
    return loss, grad / n


class AdamState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(state: AdamState, params, grads):
    """One Adam update with bias correction; params are modified in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise SchemaError("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise SchemaError("gradient shape does not match parameter shape")
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        m_hat = state.m[i] / (1 - state.beta1**t)
        v_hat = state.v[i] / (1 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def sgd_step(params, grads, lr):
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise SchemaError("gradient shape does not match parameter shape")
        p -= lr * g
    return params


def predict_logits(model: Mlp, x):
    return model.forward(x)


def accuracy(model: Mlp, x, labels):
    pred = predict_logits(model, x).argmax(axis=-1)
    return float((pred == np.asarray(labels)).mean())


def train_classifier_epoch(model: Mlp, x, labels, lr, batch_size, rng):
    """One epoch of minibatch SGD with cross-entropy; drops no samples.

    Shuffle order comes from the supplied generator, so runs are reproducible.
    """
    n = x.shape[0]
    order = rng.permutation(n)
    params = model.parameters()
    for start in range(0, n, batch_size):
        sel = order[start : start + batch_size]
        logits, cache = model.forward_cache(x[sel])
        _, grad = softmax_cross_entropy(logits, labels[sel])
        grads, _ = model.backward(cache, grad)
        sgd_step(params, grads, lr)


def model_to_vector(model: Mlp, prefix="fc") -> LayeredVector:
    """Export parameters as named blocks: fc1.weight, fc1.bias, fc2.weight, ..."""
    blocks = []
    for i, layer in enumerate(model.layers, start=1):
        blocks.append((f"{prefix}{i}.weight", layer.w.ravel()))
        blocks.append((f"{prefix}{i}.bias", layer.b.ravel()))
    return LayeredVector.from_blocks(blocks)


def add_vector_to_model(model: Mlp, vec: LayeredVector, prefix="fc"):
    """Add a layered update onto the model parameters in place."""
    for i, layer in enumerate(model.layers, start=1):
        layer.w += vec.block(f"{prefix}{i}.weight").reshape(layer.w.shape)
        layer.b += vec.block(f"{prefix}{i}.bias")


# Encoder/attention checkpoint container. Self-describing: records the softmax
# scale, truncation factor, pass count, per-layer component count and the
# feature-layer names alongside the raw matrices.
_MAGIC_MODEL = b"FGAT"
_MODEL_VERSION = 1


def _write_mlp(fh, mlp: Mlp):
    fh.write(struct.pack("<I", len(mlp.layers)))
    for layer in mlp.layers:
        out_dim, in_dim = layer.w.shape
        act = 1 if layer.activation == "relu" else 0
        fh.write(struct.pack("<IIB", in_dim, out_dim, act))
        fh.write(np.ascontiguousarray(layer.w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())


def _read_mlp(fh) -> Mlp:
    (count,) = struct.unpack("<I", fh.read(4))
    layers = []
    for _ in range(count):
        in_dim, out_dim, act = struct.unpack("<IIB", fh.read(9))
        w = np.frombuffer(fh.read(8 * in_dim * out_dim), dtype="<f8").reshape(out_dim, in_dim)
        b = np.frombuffer(fh.read(8 * out_dim), dtype="<f8")
        layers.append(Dense(w.copy(), b.copy(), "relu" if act else "none"))
    return Mlp(layers)
