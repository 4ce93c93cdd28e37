"""Small feedforward network engine with exact backprop.

Everything is float64 and batch-first: an input batch has shape
``(n, *net.input_shape)``. Layers are plain objects holding their parameters
in a dict, so the whole network can be copied, serialized and compared.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class InputShapeError(ValueError):
    pass


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"
    params: dict

    def hyper(self) -> dict:
        return {}

    def output_shape(self, input_shape):
        return tuple(input_shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None):
        self.n_in, self.n_out = int(n_in), int(n_out)
        if rng is None:
            W = np.zeros((self.n_in, self.n_out))
        else:
            W = glorot_uniform(rng, (self.n_in, self.n_out), self.n_in, self.n_out)
        self.params = {"W": W, "b": np.zeros(self.n_out)}

    def hyper(self):
        return {"n_in": self.n_in, "n_out": self.n_out}

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.n_in,):
            raise InputShapeError(f"dense expects ({self.n_in},), got {tuple(input_shape)}")
        return (self.n_out,)

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dout, cache):
        x = cache
        grads = {"W": x.T @ dout, "b": dout.sum(axis=0)}
        return dout @ self.params["W"].T, grads


class Conv2D(Layer):
    """Stride-1 convolution over (C, H, W) inputs with zero padding."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel, padding=0, rng=None):
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel, self.padding = int(kernel), int(padding)
        shape = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if rng is None:
            W = np.zeros(shape)
        else:
            k2 = self.kernel * self.kernel
            W = glorot_uniform(rng, shape, self.in_channels * k2, self.out_channels * k2)
        self.params = {"W": W, "b": np.zeros(self.out_channels)}

    def hyper(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "padding": self.padding}

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise InputShapeError(
                f"conv expects ({self.in_channels}, H, W), got {tuple(input_shape)}")
        _, h, w = input_shape
        ho = h + 2 * self.padding - self.kernel + 1
        wo = w + 2 * self.padding - self.kernel + 1
        if ho < 1 or wo < 1:
            raise InputShapeError(f"kernel {self.kernel} too large for {tuple(input_shape)}")
        return (self.out_channels, ho, wo)

    def _pad(self, x, p):
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def forward(self, x):
        xp = self._pad(x, self.padding)
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))
        out = np.einsum("nchwij,fcij->nfhw", win, self.params["W"], optimize=True)
        out += self.params["b"][None, :, None, None]
        return out, win

    def backward(self, dout, cache):
        win = cache
        W = self.params["W"]
        grads = {"W": np.einsum("nchwij,nfhw->fcij", win, dout, optimize=True),
                 "b": dout.sum(axis=(0, 2, 3))}
        k = self.kernel
        dpad = self._pad(dout, k - 1)
        dwin = sliding_window_view(dpad, (k, k), axis=(2, 3))
        dxp = np.einsum("nfhwij,fcij->nchw", dwin, W[:, :, ::-1, ::-1], optimize=True)
        p = self.padding
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp, grads


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self.params = {}

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache):
        # gradient at exactly 0 is 0
        return dout * cache, {}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; ties go to the first row-major index."""

    kind = "maxpool"

    def __init__(self, size=2):
        self.size = int(size)
        self.params = {}

    def hyper(self):
        return {"size": self.size}

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise InputShapeError(f"maxpool expects (C, H, W), got {tuple(input_shape)}")
        c, h, w = input_shape
        if h < self.size or w < self.size:
            raise InputShapeError(f"pool size {self.size} too large for {tuple(input_shape)}")
        return (c, h // self.size, w // self.size)

    def forward(self, x):
        s = self.size
        n, c, h, w = x.shape
        ho, wo = h // s, w // s
        xc = x[:, :, :ho * s, :wo * s]
        blocks = xc.reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache):
        shape, idx = cache
        s = self.size
        n, c, h, w = shape
        ho, wo = h // s, w // s
        blocks = np.zeros((n, c, ho, wo, s * s))
        np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(shape)
        dx[:, :, :ho * s, :wo * s] = (
            blocks.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s))
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self.params = {}

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), {}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, MaxPool2D, Flatten)}


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ActivationTrace:
    """Per-layer outputs of one forward pass.

    ``activations[i]`` is the output of ``net.layers[i]``; the last entry is the
    logits. ``caches`` holds what each layer needs for its backward pass.
    """

    inputs: np.ndarray
    activations: list
    caches: list
    probs: np.ndarray

    @property
    def logits(self):
        return self.activations[-1]

    @property
    def decision(self):
        return self.logits.argmax(axis=-1)


@dataclass
class GradientBundle:
    parameter_grads: list
    input_grad: np.ndarray


@dataclass
class Network:
    layers: list
    input_shape: tuple
    class_count: int
    layer_shapes: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        shape = self.input_shape
        self.layer_shapes = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            self.layer_shapes.append(shape)
        if shape != (self.class_count,):
            raise InputShapeError(f"network outputs {shape}, expected ({self.class_count},)")

    def copy(self):
        return copy.deepcopy(self)

    def parameters(self):
        """Yield (layer_index, name, array) for every parameter, in a fixed order."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    def n_parameters(self):
        return sum(a.size for _, _, a in self.parameters())

    def describe(self):
        return [{"kind": l.kind, **l.hyper()} for l in self.layers]

    def hidden_activation_layers(self):
        """Indices of the non-linearity outputs (candidates for detector features)."""
        return [i for i, l in enumerate(self.layers[:-1]) if l.kind in ("relu", "maxpool")]

    def penultimate_index(self):
        return len(self.layers) - 2

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise InputShapeError(f"expected input (n, {self.input_shape}), got {x.shape}")
        return x

    def forward(self, x) -> ActivationTrace:
        x = self._check(x)
        acts, caches = [], []
        h = x
        for layer in self.layers:
            h, cache = layer.forward(h)
            acts.append(h)
            caches.append(cache)
        return ActivationTrace(x, acts, caches, softmax(h))

    def predict_proba(self, x):
        return self.forward(x).probs

    def predict(self, x):
        return self.forward(x).decision

    def features(self, x, layer):
        """Flattened activations of ``layer`` for a batch."""
        act = self.forward(x).activations[layer]
        return act.reshape(act.shape[0], -1)

    def backprop(self, trace: ActivationTrace, dlogits) -> GradientBundle:
        grads = [None] * len(self.layers)
        d = np.asarray(dlogits, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            d, grads[i] = self.layers[i].backward(d, trace.caches[i])
        return GradientBundle(grads, d)


def forward(net: Network, x) -> ActivationTrace:
    return net.forward(x)


def cross_entropy(probs, y):
    p = probs[np.arange(len(y)), y]
    return -np.log(np.maximum(p, 1e-300))


def onehot(y, k):
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def backward(net: Network, x, y=None, *, logit_grad=None, reduction="sum") -> GradientBundle:
    """Gradients of a loss w.r.t. all parameters and the input batch.

    With ``y`` the loss is cross-entropy; otherwise ``logit_grad(trace)`` must
    return dLoss/dlogits. ``reduction='sum'`` keeps per-sample input gradients
    independent of the batch size; ``'mean'`` divides by n.
    """
    trace = net.forward(x)
    if logit_grad is not None:
        dl = logit_grad(trace)
    elif y is not None:
        y = np.asarray(y, dtype=int)
        dl = trace.probs - onehot(y, net.class_count)
    else:
        raise ValueError("need labels or a logit_grad callable")
    if reduction == "mean":
        dl = dl / len(trace.probs)
    return net.backprop(trace, dl)


def loss_value(net, x, y, reduction="sum"):
    ce = cross_entropy(net.forward(x).probs, np.asarray(y, dtype=int))
    return ce.sum() if reduction == "sum" else ce.mean()


def train(net: Network, x, y, epochs, batch_size, lr, seed, momentum=0.0, batch_transform=None):
    """Mini-batch SGD on mean cross-entropy. Mutates and returns ``net``.

    Returns ``(net, losses)`` where ``losses[e]`` is the mean per-sample
    training loss seen during epoch ``e``. ``batch_transform(net, xb, yb)``
    may replace a batch before the step (used by adversarial training).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    n = len(x)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if y.min() < 0 or y.max() >= net.class_count:
        raise ValueError("labels out of range")
    rng = np.random.default_rng(seed)
    velocity = [{k: np.zeros_like(v) for k, v in l.params.items()} for l in net.layers]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x[idx], y[idx]
            if batch_transform is not None:
                xb, yb = batch_transform(net, xb, yb)
            trace = net.forward(xb)
            total += cross_entropy(trace.probs, yb).sum()
            dl = (trace.probs - onehot(yb, net.class_count)) / len(yb)
            bundle = net.backprop(trace, dl)
            for layer, g, v in zip(net.layers, bundle.parameter_grads, velocity):
                for k in layer.params:
                    v[k] = momentum * v[k] - lr * g[k]
                    layer.params[k] += v[k]
        losses.append(total / n)
    return net, losses


def accuracy(net, x, y):
    if len(x) == 0:
        return float("nan")
    return float(np.mean(net.predict(x) == np.asarray(y)))


def grad_check(net: Network, x, y, h=1e-4):
    """Largest relative error between backprop and central differences.

    Every parameter entry and every input entry is perturbed. The loss is the
    summed cross-entropy of the batch.
    """
    x = np.array(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    bundle = backward(net, x, y)

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    worst = 0.0
    for i, name, arr in net.parameters():
        g = bundle.parameter_grads[i][name]
        for j in np.ndindex(arr.shape):
            old = arr[j]
            arr[j] = old + h
            fp = loss_value(net, x, y)
            arr[j] = old - h
            fm = loss_value(net, x, y)
            arr[j] = old
            worst = max(worst, rel(g[j], (fp - fm) / (2 * h)))
    for j in np.ndindex(x.shape):
        old = x[j]
        x[j] = old + h
        fp = loss_value(net, x, y)
        x[j] = old - h
        fm = loss_value(net, x, y)
        x[j] = old
        worst = max(worst, rel(bundle.input_grad[j], (fp - fm) / (2 * h)))
    return worst


# -- construction -----------------------------------------------------------

def build(input_shape, arch, class_count, seed):
    """Build a network from a compact layer list.

    ``arch`` is a list of tuples such as ``("conv", 4, 3)``, ``("relu",)``,
    ``("maxpool", 2)``, ``("flatten",)``, ``("dense", 16)``. A final dense
    layer to ``class_count`` outputs is appended automatically.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    for spec in arch:
        kind, args = spec[0], spec[1:]
        if kind == "conv":
            layer = Conv2D(shape[0], args[0], args[1], *(args[2:3] or (0,)), rng=rng)
        elif kind == "dense":
            if len(shape) != 1:
                layers.append(Flatten())
                shape = Flatten().output_shape(shape)
            layer = Dense(shape[0], args[0], rng=rng)
        elif kind == "relu":
            layer = ReLU()
        elif kind == "maxpool":
            layer = MaxPool2D(*args)
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    if len(shape) != 1:
        layers.append(Flatten())
        shape = Flatten().output_shape(shape)
    layers.append(Dense(shape[0], class_count, rng=rng))
    return Network(layers, input_shape, class_count)


def mlp(input_dim, hidden, class_count, seed):
    arch = []
    for h in hidden:
        arch += [("dense", h), ("relu",)]
    return build((input_dim,), arch, class_count, seed)


def parse_arch(text):
    """Parse ``"conv:4:3,relu,maxpool:2,dense:16,relu"`` into a layer list."""
    arch = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        parts = tok.split(":")
        arch.append((parts[0], *(int(p) for p in parts[1:])))
    return arch


def layer_from_descriptor(desc):
    desc = dict(desc)
    kind = desc.pop("kind")
    cls = LAYER_KINDS[kind]
    if cls is Dense:
        return Dense(desc["n_in"], desc["n_out"])
    if cls is Conv2D:
        return Conv2D(desc["in_channels"], desc["out_channels"], desc["kernel"], desc["padding"])
    if cls is MaxPool2D:
        return MaxPool2D(desc["size"])
    return cls()


@dataclass
class TrainConfig:
    """Architecture plus SGD settings; ``fit`` builds from scratch and trains."""

    arch: str = "dense:32,relu,dense:16,relu"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def build(self, input_shape, class_count):
        return build(input_shape, parse_arch(self.arch), class_count, self.seed)

    def fit(self, X, y, class_count):
        X = np.asarray(X, dtype=np.float64)
        net = self.build(X.shape[1:], class_count)
        train(net, X, y, self.epochs, self.batch_size, self.lr, self.seed, self.momentum)
        return net
