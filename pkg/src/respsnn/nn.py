"""Minimal dense/conv-1D network kernel with reverse-mode gradients.

Covers exactly the layer family the classifier needs: Conv1D, MaxPool1D,
Flatten, Dropout, Dense (ReLU / softmax), plus residual-add and
concatenate containers used by the spiking-conversion tests.  Everything
is float64; loss is summed cross-entropy so gradients are additive over
examples.
"""

from __future__ import annotations

import json

import numpy as np
from numba import njit


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Layer:
    """Forward/backward pair with named parameter tensors."""

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def param_items(self):
        return []

    def grad_items(self):
        return []

    def config(self) -> dict:
        return {}


class Conv1D(Layer):
    """Valid 1-D convolution over (batch, timesteps, channels)."""

    def __init__(self, in_channels, filters, kernel=1, activation="relu", rng=None):
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = kernel
        self.activation = activation
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / (in_channels * kernel))
        self.W = rng.normal(0.0, scale, size=(kernel, in_channels, filters))
        self.b = np.zeros(filters)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ValueError(f"expected (B, T, {self.in_channels}) input, got {x.shape}")
        self._x = x
        t_out = x.shape[1] - self.kernel + 1
        pre = np.tile(self.b, (x.shape[0], t_out, 1))
        for j in range(self.kernel):
            pre += x[:, j:j + t_out, :] @ self.W[j]
        self._pre = pre
        return relu(pre) if self.activation == "relu" else pre

    def backward(self, grad):
        if self.activation == "relu":
            grad = grad * (self._pre > 0)
        t_out = grad.shape[1]
        dx = np.zeros_like(self._x)
        np.sum(grad, axis=(0, 1), out=self.db)
        for j in range(self.kernel):
            xs = self._x[:, j:j + t_out, :]
            np.einsum("btc,btf->cf", xs, grad, out=self.dW[j])
            dx[:, j:j + t_out, :] += grad @ self.W[j].T
        return dx

    def param_items(self):
        return [("W", self.W), ("b", self.b)]

    def grad_items(self):
        return [("W", self.dW), ("b", self.db)]

    def config(self):
        return {"in_channels": self.in_channels, "filters": self.filters,
                "kernel": self.kernel, "activation": self.activation}


class MaxPool1D(Layer):
    def __init__(self, pool=1, stride=1):
        if pool < 1 or stride < 1:
            raise ValueError("pool and stride must be >= 1")
        self.pool = pool
        self.stride = stride

    def forward(self, x, train=False, rng=None):
        b, t, c = x.shape
        t_out = (t - self.pool) // self.stride + 1
        self._in_shape = x.shape
        if self.pool == 1 and self.stride == 1:
            self._argmax = None
            return x
        out = np.empty((b, t_out, c), dtype=x.dtype)
        self._argmax = np.empty((b, t_out, c), dtype=int)
        for w in range(t_out):
            s = w * self.stride
            block = x[:, s:s + self.pool, :]
            idx = block.argmax(axis=1)
            self._argmax[:, w, :] = s + idx
            out[:, w, :] = np.take_along_axis(block, idx[:, None, :], axis=1)[:, 0, :]
        return out

    def backward(self, grad):
        if self._argmax is None:
            return grad
        dx = np.zeros(self._in_shape, dtype=grad.dtype)
        b, t_out, c = grad.shape
        bi = np.arange(b)[:, None, None]
        ci = np.arange(c)[None, None, :]
        np.add.at(dx, (bi, self._argmax, ci), grad)
        return dx

    def config(self):
        return {"pool": self.pool, "stride": self.stride}


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._in_shape)


class Dropout(Layer):
    """Inverted dropout; identity in inference mode."""

    def __init__(self, rate=0.01):
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._mask = None
            return x
        rng = rng or np.random.default_rng(0)
        self._mask = ((rng.random(x.shape) >= self.rate)
                      / (1.0 - self.rate)).astype(x.dtype)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask

    def config(self):
        return {"rate": self.rate}


class Dense(Layer):
    def __init__(self, in_features, units, activation=None, rng=None):
        self.in_features = in_features
        self.units = units
        self.activation = activation
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / in_features)
        self.W = rng.normal(0.0, scale, size=(in_features, units))
        self.b = np.zeros(units)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected (B, {self.in_features}) input, got {x.shape}")
        self._x = x
        pre = x @ self.W + self.b
        self._pre = pre
        if self.activation == "relu":
            return relu(pre)
        if self.activation == "softmax":
            self._probs = softmax(pre)
            return self._probs
        return pre

    def backward(self, grad, from_logits=False):
        if self.activation == "relu":
            grad = grad * (self._pre > 0)
        elif self.activation == "softmax" and not from_logits:
            p = self._probs
            grad = p * (grad - (grad * p).sum(axis=-1, keepdims=True))
        np.matmul(self._x.T, grad, out=self.dW)
        np.sum(grad, axis=0, out=self.db)
        return grad @ self.W.T

    def param_items(self):
        return [("W", self.W), ("b", self.b)]

    def grad_items(self):
        return [("W", self.dW), ("b", self.db)]

    def config(self):
        return {"in_features": self.in_features, "units": self.units,
                "activation": self.activation}


class ResidualBlock(Layer):
    """y = f(x) + x, with the skip carrying weight 1."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False, rng=None):
        y = x
        for layer in self.layers:
            y = layer.forward(y, train=train, rng=rng)
        if y.shape != x.shape:
            raise ValueError("residual branch must preserve shape")
        return y + x

    def backward(self, grad):
        g = grad
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g + grad

    def param_items(self):
        return [(f"{i}.{n}", p) for i, l in enumerate(self.layers)
                for n, p in l.param_items()]

    def grad_items(self):
        return [(f"{i}.{n}", p) for i, l in enumerate(self.layers)
                for n, p in l.grad_items()]


class Concatenate(Layer):
    """Channel-wise merge of parallel branches fed the same input."""

    def __init__(self, branches):
        self.branches = [list(b) for b in branches]

    def forward(self, x, train=False, rng=None):
        outs = []
        for branch in self.branches:
            y = x
            for layer in branch:
                y = layer.forward(y, train=train, rng=rng)
            outs.append(y)
        self._widths = [o.shape[-1] for o in outs]
        return np.concatenate(outs, axis=-1)

    def backward(self, grad):
        dx = None
        offset = 0
        for branch, width in zip(self.branches, self._widths):
            g = grad[..., offset:offset + width]
            offset += width
            for layer in reversed(branch):
                g = layer.backward(g)
            dx = g if dx is None else dx + g
        return dx

    def param_items(self):
        return [(f"{i}.{j}.{n}", p) for i, b in enumerate(self.branches)
                for j, l in enumerate(b) for n, p in l.param_items()]

    def grad_items(self):
        return [(f"{i}.{j}.{n}", p) for i, b in enumerate(self.branches)
                for j, l in enumerate(b) for n, p in l.grad_items()]


class CnnModel:
    """Ordered layer stack ending in a softmax Dense classifier."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(np.float64)

    def astype(self, dtype):
        """Convert parameters and gradient buffers in place; inputs follow."""
        self.dtype = np.dtype(dtype)

        def convert(layers):
            for layer in layers:
                for name in ("W", "b", "dW", "db"):
                    if hasattr(layer, name):
                        setattr(layer, name,
                                getattr(layer, name).astype(self.dtype))
                if isinstance(layer, ResidualBlock):
                    convert(layer.layers)
                elif isinstance(layer, Concatenate):
                    for branch in layer.branches:
                        convert(branch)

        convert(self.layers)
        return self

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"expected input shape (B, {self.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def predict(self, x):
        return self.forward(x, train=False).argmax(axis=-1)

    def parameters(self):
        return [(f"{i}.{n}", p) for i, l in enumerate(self.layers)
                for n, p in l.param_items()]

    def gradients(self):
        return [(f"{i}.{n}", g) for i, l in enumerate(self.layers)
                for n, g in l.grad_items()]

    def zero_grad(self):
        for _, g in self.gradients():
            g[...] = 0.0

    def parameter_count(self) -> int:
        return int(sum(p.size for _, p in self.parameters()))

    def get_weights(self):
        return [p.copy() for _, p in self.parameters()]

    def set_weights(self, weights):
        for (_, p), w in zip(self.parameters(), weights):
            p[...] = w


def loss_and_gradients(model: CnnModel, x, labels, rng=None, weight_decay=0.0):
    """Summed cross-entropy loss and parameter gradients for one batch."""
    labels = np.asarray(labels, dtype=int)
    probs = model.forward(x, train=True, rng=rng)
    n_classes = probs.shape[-1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError("label out of range")
    eps = 1e-300  # guards log(0) without perturbing the gradient path
    picked = probs[np.arange(len(labels)), labels].astype(np.float64)
    loss = float(-np.log(picked + eps).sum())
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    last = model.layers[-1]
    if isinstance(last, Dense) and last.activation == "softmax":
        grad = last.backward(dlogits, from_logits=True)
        rest = model.layers[:-1]
    else:
        raise ValueError("model must end in a softmax Dense layer")
    for layer in reversed(rest):
        grad = layer.backward(grad)
    grads = [g for _, g in model.gradients()]
    if weight_decay:
        for (name, p), g in zip(model.parameters(), grads):
            if name.endswith("W"):
                loss += 0.5 * weight_decay * float((p * p).sum())
                g += weight_decay * p
    return loss, grads


@njit(cache=True)
def _adam_update(p, g, m, v, beta1, beta2, alpha, eps_t):
    one = np.float32(1.0)
    for i in range(p.size):
        gi = np.float32(g[i])
        mi = beta1 * m[i] + (one - beta1) * gi
        vi = beta2 * v[i] + (one - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= alpha * mi / (np.sqrt(vi) + eps_t)


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8).

    Moments live in one flat float32 buffer: the update direction needs
    far less precision than the float64 parameters it nudges.  The fused
    single-pass kernel touches each moment once per step instead of once
    per elementwise operation, which dominates step cost at small batches.
    """

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self._offsets = np.cumsum([0] + [p.size for p in params])
            self.m = np.zeros(int(self._offsets[-1]), dtype=np.float32)
            self.v = np.zeros_like(self.m)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        # p -= alpha * m / (sqrt(v) + eps_t) is bias-corrected Adam with
        # alpha = lr*sqrt(bc2)/bc1 and eps_t = eps*sqrt(bc2)
        alpha = np.float32(self.lr * np.sqrt(bc2) / bc1)
        eps_t = np.float32(self.eps * np.sqrt(bc2))
        for p, g, lo, hi in zip(params, grads,
                                self._offsets, self._offsets[1:]):
            _adam_update(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                         self.m[lo:hi], self.v[lo:hi],
                         np.float32(self.beta1), np.float32(self.beta2),
                         alpha, eps_t)


def build_default_model(input_len=28, in_channels=2, conv_filters=64,
                        kernel=1, hidden=(200, 100), classes=2,
                        dropout=0.01, seed=0) -> CnnModel:
    """Classifier stack: Conv1D(64, k=1, ReLU) -> MaxPool(1,1) -> Flatten
    -> Dropout(0.01) -> Dense(200, ReLU) -> Dense(100, ReLU)
    -> Dense(classes, softmax).
    """
    rng = np.random.default_rng(seed)
    layers = [
        Conv1D(in_channels, conv_filters, kernel=kernel, activation="relu", rng=rng),
        MaxPool1D(pool=1, stride=1),
        Flatten(),
        Dropout(dropout),
    ]
    width = (input_len - kernel + 1) * conv_filters
    for units in hidden:
        layers.append(Dense(width, units, activation="relu", rng=rng))
        width = units
    layers.append(Dense(width, classes, activation="softmax", rng=rng))
    return CnnModel(layers, input_shape=(input_len, in_channels))


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_FORMAT = "respsnn-model"
CHECKPOINT_VERSION = 1

_LAYER_TYPES = {"Conv1D": Conv1D, "MaxPool1D": MaxPool1D, "Flatten": Flatten,
                "Dropout": Dropout, "Dense": Dense}


def _layer_entry(layer: Layer) -> dict:
    entry = {"type": type(layer).__name__, "config": layer.config()}
    params = {n: p.tolist() for n, p in layer.param_items()}
    if params:
        entry["params"] = params
    return entry


def save_checkpoint(model: CnnModel, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_shape": list(model.input_shape),
        "dtype": model.dtype.name,
        "layers": [_layer_entry(l) for l in model.layers],
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> CnnModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a model checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    layers = []
    for entry in doc["layers"]:
        cls = _LAYER_TYPES.get(entry["type"])
        if cls is None:
            raise ValueError(f"unknown layer type {entry['type']!r}")
        layer = cls(**entry["config"])
        for name, value in entry.get("params", {}).items():
            getattr(layer, name)[...] = np.asarray(value, dtype=float)
        layers.append(layer)
    model = CnnModel(layers, input_shape=tuple(doc["input_shape"]))
    return model.astype(doc.get("dtype", "float64"))
