"""Downstream classifiers with hand-written backprop, plus MEG random features.

Inputs follow the adapter's layout: a d-vector, or a d x S matrix whose
columns are Monte Carlo samples. Internally layers work batch-first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError
from .exact_gp import ExactPosterior
from .ski import SkiOperator, ski_cov_matvec, ski_cov_matvec_grad, ski_mean_grad, ski_posterior_mean

__all__ = [
    "Dense",
    "Conv1d",
    "MaxPool1d",
    "ReLU",
    "Flatten",
    "Classifier",
    "build_classifier",
    "forward",
    "loss_and_grads",
    "softmax",
    "MegFeatureBank",
    "make_meg_bank",
    "meg_features",
    "meg_features_grad",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class Layer:
    kind = "layer"
    param_names: tuple = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        """Return ``(param_grads, input_grad)`` using the cached forward input."""
        raise NotImplementedError

    def out_shape(self, in_shape):
        raise NotImplementedError

    @property
    def params(self):
        return [getattr(self, name) for name in self.param_names]

    def config(self) -> dict:
        return {}


class Dense(Layer):
    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=float)
        self.bias = np.asarray(bias, dtype=float)

    @classmethod
    def init(cls, n_in, n_out, rng):
        # He initialization for the rectified layers
        return cls(rng.normal(0.0, math.sqrt(2.0 / n_in), (n_in, n_out)), np.zeros(n_out))

    def forward(self, x):
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, grad):
        return [self._x.T @ grad, grad.sum(axis=0)], grad @ self.weight.T

    def out_shape(self, in_shape):
        if in_shape != (self.weight.shape[0],):
            raise InvalidArgumentError(f"dense layer expects {self.weight.shape[0]} inputs, got {in_shape}")
        return (self.weight.shape[1],)


class Conv1d(Layer):
    """Valid (unpadded) stride-1 convolution; weight is (out, in, width)."""

    kind = "conv1d"
    param_names = ("weight", "bias")

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=float)
        self.bias = np.asarray(bias, dtype=float)

    @classmethod
    def init(cls, c_in, c_out, width, rng):
        fan_in = c_in * width
        return cls(rng.normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, width)), np.zeros(c_out))

    def forward(self, x):
        windows = sliding_window_view(x, self.weight.shape[2], axis=2)  # (B, C, L', K)
        self._windows = windows
        self._length = x.shape[2]
        return np.einsum("bclk,ock->bol", windows, self.weight, optimize=True) + self.bias[None, :, None]

    def backward(self, grad):
        width = self.weight.shape[2]
        g_w = np.einsum("bol,bclk->ock", grad, self._windows, optimize=True)
        g_b = grad.sum(axis=(0, 2))
        padded = np.pad(grad, ((0, 0), (0, 0), (width - 1, width - 1)))
        g_windows = sliding_window_view(padded, width, axis=2)  # (B, O, L, K)
        g_x = np.einsum("bolk,ock->bcl", g_windows, self.weight[:, :, ::-1], optimize=True)
        return [g_w, g_b], g_x

    def out_shape(self, in_shape):
        c, length = in_shape
        if c != self.weight.shape[1]:
            raise InvalidArgumentError("conv1d channel mismatch")
        out = length - self.weight.shape[2] + 1
        if out < 1:
            raise InvalidArgumentError("input too short for the convolution")
        return (self.weight.shape[0], out)


class MaxPool1d(Layer):
    """Non-overlapping max pooling; a trailing remainder is dropped."""

    kind = "maxpool1d"

    def __init__(self, size=2):
        self.size = int(size)

    def forward(self, x):
        b, c, length = x.shape
        usable = (length // self.size) * self.size
        blocks = x[:, :, :usable].reshape(b, c, usable // self.size, self.size)
        arg = blocks.argmax(axis=3)
        self._arg = arg
        self._shape = x.shape
        return np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]

    def backward(self, grad):
        b, c, length = self._shape
        out_len = grad.shape[2]
        g = np.zeros((b, c, out_len, self.size))
        np.put_along_axis(g, self._arg[..., None], grad[..., None], axis=3)
        g_x = np.zeros(self._shape)
        g_x[:, :, : out_len * self.size] = g.reshape(b, c, -1)
        return [], g_x

    def out_shape(self, in_shape):
        c, length = in_shape
        return (c, length // self.size)

    def config(self):
        return {"size": self.size}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return [], grad * self._mask

    def out_shape(self, in_shape):
        return in_shape


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return [], grad.reshape(self._shape)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Channels(Layer):
    """Adds a singleton channel axis so a feature vector can feed a conv layer."""

    kind = "channels"

    def forward(self, x):
        return x[:, None, :]

    def backward(self, grad):
        return [], grad[:, 0, :]

    def out_shape(self, in_shape):
        return (1,) + tuple(in_shape)


_LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv1d, MaxPool1d, ReLU, Flatten, Channels)}


@dataclass
class Classifier:
    """A feed-forward stack ending in class logits (softmax lives in the loss)."""

    kind: str
    layers: list
    n_inputs: int
    n_classes: int

    def __post_init__(self):
        self.shapes()

    def shapes(self):
        """Output shape after each layer; raises if the stack does not compose."""
        shape = (self.n_inputs,)
        out = []
        for layer in self.layers:
            shape = layer.out_shape(shape)
            out.append(shape)
        if shape != (self.n_classes,):
            raise InvalidArgumentError(f"classifier ends in shape {shape}, expected ({self.n_classes},)")
        return out

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def copy(self) -> "Classifier":
        return classifier_from_dict(classifier_to_dict(self))

    def set_params(self, values):
        values = list(values)
        for layer in self.layers:
            for name in layer.param_names:
                setattr(layer, name, np.array(values.pop(0), dtype=float))

    def forward_batch(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward_batch(self, grad):
        param_grads = []
        for layer in reversed(self.layers):
            g_params, grad = layer.backward(grad)
            param_grads = g_params + param_grads
        return param_grads, grad


def build_classifier(kind: str, n_inputs: int, n_classes: int, rng=None, hidden: int = 256) -> Classifier:
    """``logreg``, ``mlp`` (two hidden layers) or ``convnet``.

    The convnet is conv(4 filters, width 5) - pool(2) - conv(4, 5) - pool(2)
    - dense(hidden), with ReLU after every conv and dense layer, then a
    class-logit layer.
    """
    rng = np.random.default_rng(rng)
    if kind == "logreg":
        layers = [Dense.init(n_inputs, n_classes, rng)]
    elif kind == "mlp":
        layers = [
            Dense.init(n_inputs, hidden, rng),
            ReLU(),
            Dense.init(hidden, hidden, rng),
            ReLU(),
            Dense.init(hidden, n_classes, rng),
        ]
    elif kind == "convnet":
        after_conv1 = n_inputs - 4
        after_pool1 = after_conv1 // 2
        after_conv2 = after_pool1 - 4
        flat = 4 * (after_conv2 // 2)
        if flat < 4:
            raise InvalidArgumentError(f"convnet needs a longer input than {n_inputs}")
        layers = [
            Channels(),
            Conv1d.init(1, 4, 5, rng),
            ReLU(),
            MaxPool1d(2),
            Conv1d.init(4, 4, 5, rng),
            ReLU(),
            MaxPool1d(2),
            Flatten(),
            Dense.init(flat, hidden, rng),
            ReLU(),
            Dense.init(hidden, n_classes, rng),
        ]
    else:
        raise InvalidArgumentError(f"unknown classifier kind {kind!r}")
    return Classifier(kind, layers, n_inputs, n_classes)


def classifier_to_dict(clf: Classifier) -> dict:
    layers = []
    for layer in clf.layers:
        entry = {"kind": layer.kind, "config": layer.config(), "params": {}}
        for name in layer.param_names:
            arr = getattr(layer, name)
            entry["params"][name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
        layers.append(entry)
    return {
        "version": CHECKPOINT_VERSION,
        "kind": clf.kind,
        "n_inputs": clf.n_inputs,
        "n_classes": clf.n_classes,
        "layers": layers,
    }


def classifier_from_dict(data: dict) -> Classifier:
    if data.get("version") != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"unsupported classifier format version {data.get('version')}")
    layers = []
    for entry in data["layers"]:
        cls = _LAYER_TYPES[entry["kind"]]
        tensors = {
            name: np.asarray(spec["data"], dtype=float).reshape(spec["shape"])
            for name, spec in entry["params"].items()
        }
        layers.append(cls(**tensors, **entry.get("config", {})))
    return Classifier(data["kind"], layers, data["n_inputs"], data["n_classes"])


def _batch(z):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        return z[None, :], True
    return z.T, False


def forward(clf: Classifier, z) -> np.ndarray:
    """Class logits for a d-vector (returns C) or a d x S sample matrix (S x C)."""
    x, single = _batch(z)
    if x.shape[1] != clf.n_inputs:
        raise InvalidArgumentError(f"classifier expects {clf.n_inputs} inputs, got {x.shape[1]}")
    logits = clf.forward_batch(x)
    return logits[0] if single else logits


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_and_grads(clf: Classifier, z, y: int):
    """Softmax cross-entropy averaged over the sample columns of ``z``.

    Returns ``(loss, param_grads, z_grad)`` with ``z_grad`` shaped like ``z``;
    the 1/S average is already folded into both gradients.
    """
    x, single = _batch(z)
    if not 0 <= int(y) < clf.n_classes:
        raise InvalidArgumentError(f"label {y} outside 0..{clf.n_classes - 1}")
    if x.shape[1] != clf.n_inputs:
        raise InvalidArgumentError(f"classifier expects {clf.n_inputs} inputs, got {x.shape[1]}")
    logits = clf.forward_batch(x)
    n = x.shape[0]
    loss = -_log_softmax(logits)[:, int(y)].mean()
    g_logits = softmax(logits)
    g_logits[:, int(y)] -= 1.0
    g_logits /= n
    param_grads, g_x = clf.backward_batch(g_logits)
    return float(loss), param_grads, (g_x[0] if single else g_x.T)


# --------------------------------------------------------------------------
# MEG random features
# --------------------------------------------------------------------------


@dataclass
class MegFeatureBank:
    """Fixed random directions (M x d) and phases (M,)."""

    directions: np.ndarray
    phases: np.ndarray
    bandwidths: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.phases.size

    def to_dict(self) -> dict:
        return {
            "directions": {"shape": list(self.directions.shape), "data": self.directions.ravel().tolist()},
            "phases": self.phases.tolist(),
        }

    @classmethod
    def from_dict(cls, data) -> "MegFeatureBank":
        spec = data["directions"]
        return cls(np.asarray(spec["data"], dtype=float).reshape(spec["shape"]), np.asarray(data["phases"], dtype=float))


MEG_BANDWIDTHS = (0.25, 0.5, 1.0, 2.0, 4.0)


def make_meg_bank(d: int, M: int = 1000, rng=None, scale: float = 1.0, bandwidths=MEG_BANDWIDTHS) -> MegFeatureBank:
    """Draw a mixture of Gaussian-kernel random Fourier directions.

    Each feature picks a bandwidth multiplier uniformly from ``bandwidths``;
    its direction is ``N(0, I / l^2)`` with ``l = multiplier * scale * sqrt(d)``
    so that ``l`` tracks the typical distance between d-dimensional inputs
    whose entries have magnitude ``scale``.
    """
    rng = np.random.default_rng(rng)
    mult = rng.choice(np.asarray(bandwidths, dtype=float), size=M)
    lengths = mult * scale * math.sqrt(d)
    directions = rng.standard_normal((M, d)) / lengths[:, None]
    phases = rng.uniform(0.0, 2 * math.pi, size=M)
    return MegFeatureBank(directions, phases, mult)


def _moments(bank: MegFeatureBank, context):
    """``(W mean, diag(W cov W^T))`` for an exact posterior or SKI operator."""
    w = bank.directions
    if isinstance(context, ExactPosterior):
        mean = context.mean
        cov_w = context.cov @ w.T
    elif isinstance(context, SkiOperator):
        mean = ski_posterior_mean(context)
        cov_w = ski_cov_matvec(context, None, w.T)
    else:
        mean = context.mean
        cov_w = context.cov_matvec(w.T)
    if mean.size != w.shape[1]:
        raise InvalidArgumentError("feature bank dimension does not match the posterior")
    return w @ mean, np.einsum("id,di->i", w, cov_w)


def meg_features(bank: MegFeatureBank, context) -> np.ndarray:
    """Expected random Fourier features ``sqrt(2/M) exp(-q/2) cos(p + b)``
    with ``p = w^T mean`` and ``q = w^T cov w``, computed in closed form."""
    proj, quad = _moments(bank, context)
    return math.sqrt(2.0 / bank.M) * np.exp(-0.5 * quad) * np.cos(proj + bank.phases)


def meg_features_grad(bank: MegFeatureBank, context, upstream) -> np.ndarray:
    """Pull a gradient on the M features back to (alpha, beta, gamma)."""
    upstream = np.asarray(upstream, dtype=float)
    if not np.any(upstream):
        return np.zeros(3)
    proj, quad = _moments(bank, context)
    scale = math.sqrt(2.0 / bank.M) * np.exp(-0.5 * quad)
    feats = scale * np.cos(proj + bank.phases)
    proj_bar = -upstream * scale * np.sin(proj + bank.phases)
    quad_bar = -0.5 * upstream * feats
    w = bank.directions
    mean_bar = w.T @ proj_bar
    if isinstance(context, ExactPosterior):
        cov_bar = (w.T * quad_bar) @ w
        return context.vjp(mean_bar, cov_bar)
    if isinstance(context, SkiOperator):
        grad_mean = ski_mean_grad(context, None, mean_bar)
        grad_cov, _ = ski_cov_matvec_grad(context, None, w.T, w.T * quad_bar)
        return grad_mean + grad_cov
    raise InvalidArgumentError("MEG gradients need an exact posterior or SKI operator")
