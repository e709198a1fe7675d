"""Activations, layer specs, the two reference architectures, and backprop.

Parameters of a network live in one flat vector (``theta``); per-layer
weight and bias tensors are views into it, so per-example gradients come
out as a ``(batch, n)`` matrix whose columns line up with ``theta``.
Images are NHWC.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from . import _kernels as K
from .tensor import (
    TRAIN_DTYPE,
    ParameterError,
    RngStream,
    ShapeError,
    check_finite,
    uniform,
)

# ---------------------------------------------------------------------------
# activations


@dataclass(frozen=True)
class TemperedSigmoidParams:
    s: float = 2.0  # scale
    T: float = 2.0  # inverse temperature
    o: float = 1.0  # offset

    @property
    def bound(self) -> float:
        """Largest absolute value the activation can take."""
        return max(abs(self.o), abs(self.s - self.o))


TANH_PARAMS = TemperedSigmoidParams(2.0, 2.0, 1.0)


def tempered_sigmoid(x, p: TemperedSigmoidParams):
    """s / (1 + exp(-T x)) - o, evaluated through a saturating sigmoid."""
    return p.s * expit(p.T * np.asarray(x)) - p.o


def tempered_sigmoid_grad(x, p: TemperedSigmoidParams):
    sig = expit(p.T * np.asarray(x))
    return p.s * p.T * sig * (1.0 - sig)


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x):
    # subgradient at exactly 0 is 0
    return (np.asarray(x) > 0).astype(np.result_type(x, np.float32))


@dataclass(frozen=True)
class Activation:
    kind: str = "none"  # "relu" | "tempered_sigmoid" | "none"
    params: TemperedSigmoidParams | None = None

    def __post_init__(self):
        if self.kind not in ("relu", "tempered_sigmoid", "none"):
            raise ParameterError(f"unknown activation {self.kind!r}")
        if (self.kind == "tempered_sigmoid") != (self.params is not None):
            raise ParameterError("tempered_sigmoid needs params; other kinds take none")

    @classmethod
    def parse(cls, name: str, s=2.0, T=2.0, o=1.0) -> "Activation":
        name = name.lower().replace("-", "_")
        if name == "relu":
            return cls("relu")
        if name == "tanh":
            return cls("tempered_sigmoid", TANH_PARAMS)
        if name in ("tempered_sigmoid", "tempered"):
            return cls("tempered_sigmoid", TemperedSigmoidParams(s, T, o))
        if name == "none":
            return cls("none")
        raise ParameterError(f"unknown activation {name!r}")

    def __call__(self, z):
        if self.kind == "relu":
            return relu(z)
        if self.kind == "tempered_sigmoid":
            p = self.params
            return (p.s * expit(p.T * z) - p.o).astype(z.dtype, copy=False)
        return z

    def backward(self, z, y, dy):
        """Gradient w.r.t. the pre-activation ``z`` given output ``y``."""
        if self.kind == "relu":
            return dy * (z > 0)
        if self.kind == "tempered_sigmoid":
            p = self.params
            sig = (y + p.o) / p.s
            return dy * ((p.s * p.T) * sig * (1 - sig))
        return dy


RELU = Activation("relu")
TANH = Activation("tempered_sigmoid", TANH_PARAMS)
NO_ACTIVATION = Activation("none")

# ---------------------------------------------------------------------------
# architecture description

LAYER_KINDS = ("conv2d", "max_pool", "avg_pool", "dense", "global_avg", "softmax_output")
_PARAM_KINDS = ("conv2d", "dense", "softmax_output")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int = 0  # filters (conv) or units (dense)
    window: int = 0
    stride: int = 1
    activation: Activation | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.kind in _PARAM_KINDS:
            if self.activation is None:
                raise ParameterError(f"{self.kind} layer needs an activation tag")
            if self.size <= 0:
                raise ParameterError(f"{self.kind} layer needs a positive size")
        elif self.activation is not None:
            raise ParameterError(f"{self.kind} layer carries no activation")
        if self.kind in ("conv2d", "max_pool", "avg_pool") and (
            self.window <= 0 or self.stride <= 0
        ):
            raise ParameterError(f"{self.kind} needs positive window and stride")

    @property
    def has_params(self) -> bool:
        return self.kind in _PARAM_KINDS


def _same(n, k, s):
    out = -(-n // s)
    pad = max((out - 1) * s + k - n, 0)
    return out, pad // 2, pad - pad // 2


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple  # (H, W, C)
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.shapes()[-1] != (self.num_classes,):
            raise ShapeError(
                f"network ends in shape {self.shapes()[-1]}, expected ({self.num_classes},)"
            )

    def shapes(self):
        """Output shape after each layer, starting with the input shape."""
        shape = self.input_shape
        out = [shape]
        for L in self.layers:
            if L.kind in ("conv2d", "max_pool", "avg_pool"):
                if len(shape) != 3:
                    raise ShapeError(f"{L.kind} needs a (H, W, C) input, got {shape}")
                h, w, c = shape
                ho = _same(h, L.window, L.stride)[0]
                wo = _same(w, L.window, L.stride)[0]
                shape = (ho, wo, L.size if L.kind == "conv2d" else c)
            elif L.kind in ("dense", "softmax_output"):
                shape = (L.size,)
            elif L.kind == "global_avg":
                if len(shape) != 3:
                    raise ShapeError("global_avg needs a (H, W, C) input")
                shape = (shape[2],)
            out.append(shape)
        return out

    def param_shapes(self):
        """[(weight_shape, bias_shape)] for every parametrised layer, in order."""
        shapes = self.shapes()
        res = []
        for L, sin in zip(self.layers, shapes):
            if L.kind == "conv2d":
                res.append(((L.window, L.window, sin[2], L.size), (L.size,)))
            elif L.kind in ("dense", "softmax_output"):
                res.append(((int(np.prod(sin)), L.size), (L.size,)))
        return res

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(w)) + int(np.prod(b)) for w, b in self.param_shapes())

    def with_activation(self, act: Activation) -> "NetworkSpec":
        """Same architecture with every hidden activation replaced by ``act``."""
        layers = tuple(
            LayerSpec(L.kind, L.size, L.window, L.stride,
                      act if (L.activation is not None and L.activation.kind != "none")
                      else L.activation)
            for L in self.layers
        )
        return NetworkSpec(layers, self.input_shape, self.num_classes)


def build_mnist_net(activation: Activation = TANH) -> NetworkSpec:
    """Two strided convs + max pools, a 32-unit dense layer, 10 logits."""
    return NetworkSpec(
        (
            LayerSpec("conv2d", 16, 8, 2, activation),
            LayerSpec("max_pool", 0, 2, 2),
            LayerSpec("conv2d", 32, 4, 2, activation),
            LayerSpec("max_pool", 0, 2, 2),
            LayerSpec("dense", 32, activation=activation),
            LayerSpec("softmax_output", 10, activation=NO_ACTIVATION),
        ),
        (28, 28, 1),
        10,
    )


def build_cifar_net(activation: Activation = TANH) -> NetworkSpec:
    """All-convolutional CIFAR10 net ending in a spatial average over 10 maps."""
    conv = lambda f: LayerSpec("conv2d", f, 3, 1, activation)  # noqa: E731
    pool = LayerSpec("avg_pool", 0, 2, 2)
    return NetworkSpec(
        (
            conv(32), conv(32), pool,
            conv(64), conv(64), pool,
            conv(128), conv(128), pool,
            conv(256),
            LayerSpec("conv2d", 10, 3, 1, NO_ACTIVATION),
            LayerSpec("global_avg"),
        ),
        (32, 32, 3),
        10,
    )


# ---------------------------------------------------------------------------
# parameters


def param_views(net: NetworkSpec, theta: np.ndarray):
    """[(W, b)] views into the flat parameter vector."""
    if theta.ndim != 1 or theta.size != net.num_params:
        raise ShapeError(f"expected flat params of length {net.num_params}, got {theta.shape}")
    views, off = [], 0
    for ws, bs in net.param_shapes():
        nw, nb = int(np.prod(ws)), int(np.prod(bs))
        views.append((theta[off : off + nw].reshape(ws), theta[off + nw : off + nw + nb]))
        off += nw + nb
    return views


def init_params(net: NetworkSpec, rng: RngStream, dtype=TRAIN_DTYPE) -> np.ndarray:
    """Glorot-uniform weights, zero biases; same scheme for every activation."""
    theta = np.zeros(net.num_params, dtype=dtype)
    for i, (W, _) in enumerate(param_views(net, theta)):
        if W.ndim == 4:
            k = W.shape[0] * W.shape[1]
            fan_in, fan_out = k * W.shape[2], k * W.shape[3]
        else:
            fan_in, fan_out = W.shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        u = uniform(rng.derive("init", i), W.size)
        W[...] = ((2.0 * u - 1.0) * limit).reshape(W.shape)
    return theta


# ---------------------------------------------------------------------------
# compiled layers


@dataclass
class _Conv:
    spec: LayerSpec
    h: int
    w: int
    c: int
    ho: int = field(init=False)
    wo: int = field(init=False)

    def __post_init__(self):
        k, s = self.spec.window, self.spec.stride
        self.ho, self.pt, self.pb = _same(self.h, k, s)
        self.wo, self.pl, self.pr = _same(self.w, k, s)

    def forward(self, x, W, b):
        k, s = self.spec.window, self.spec.stride
        xp = np.pad(x, ((0, 0), (self.pt, self.pb), (self.pl, self.pr), (0, 0)))
        cols = K.im2col(xp, k, s, self.ho, self.wo)
        z = cols @ W.reshape(-1, W.shape[-1]) + b
        z = z.reshape(x.shape[0], self.ho, self.wo, -1)
        y = self.spec.activation(z)
        return y, (cols, z, y)

    def backward(self, cache, W, dy, need_dx, per_example):
        cols, z, y = cache
        bsz = dy.shape[0]
        dz = self.spec.activation.backward(z, y, dy).reshape(bsz, self.ho * self.wo, -1)
        if per_example:
            dW = np.matmul(cols.transpose(0, 2, 1), dz)
            db = dz.sum(axis=1)
        else:
            dW = cols.reshape(-1, cols.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
            db = dz.sum(axis=(0, 1))
        dx = None
        if need_dx:
            k, s = self.spec.window, self.spec.stride
            dcols = dz @ W.reshape(-1, W.shape[-1]).T
            hp, wp = self.h + self.pt + self.pb, self.w + self.pl + self.pr
            dxp = K.col2im(np.ascontiguousarray(dcols), hp, wp, self.c, k, s, self.ho, self.wo)
            dx = dxp[:, self.pt : self.pt + self.h, self.pl : self.pl + self.w, :]
        return dx, dW, db


@dataclass
class _Dense:
    spec: LayerSpec
    in_shape: tuple

    def forward(self, x, W, b):
        xf = x.reshape(x.shape[0], -1)
        z = xf @ W + b
        y = self.spec.activation(z)
        return y, (xf, z, y)

    def backward(self, cache, W, dy, need_dx, per_example):
        xf, z, y = cache
        dz = self.spec.activation.backward(z, y, dy)
        if per_example:
            dW = xf[:, :, None] * dz[:, None, :]
            db = dz
        else:
            dW = xf.T @ dz
            db = dz.sum(axis=0)
        dx = (dz @ W.T).reshape((dy.shape[0],) + self.in_shape) if need_dx else None
        return dx, dW, db


@dataclass
class _Pool:
    spec: LayerSpec
    h: int
    w: int
    c: int

    def __post_init__(self):
        k, s = self.spec.window, self.spec.stride
        self.ho, self.pt, self.pb = _same(self.h, k, s)
        self.wo, self.pl, self.pr = _same(self.w, k, s)
        self.hp = self.h + self.pt + self.pb
        self.wp = self.w + self.pl + self.pr
        # real (unpadded) pixels per window, for averaging
        mask = np.zeros((self.hp, self.wp))
        mask[self.pt : self.pt + self.h, self.pl : self.pl + self.w] = 1
        win = np.lib.stride_tricks.sliding_window_view(mask, (k, k))[::s, ::s]
        self.count = win[: self.ho, : self.wo].sum(axis=(-1, -2))

    def _pad(self, x, value):
        return np.pad(
            x, ((0, 0), (self.pt, self.pb), (self.pl, self.pr), (0, 0)), constant_values=value
        )

    def forward(self, x, W=None, b=None):
        k, s = self.spec.window, self.spec.stride
        if self.spec.kind == "max_pool":
            y, arg = K.maxpool(self._pad(x, -np.inf), k, s, self.ho, self.wo)
            return y, arg
        count = self.count.astype(x.dtype)
        return K.avgpool(self._pad(x, 0), count, k, s, self.ho, self.wo), None

    def backward(self, cache, W, dy, need_dx, per_example):
        if not need_dx:
            return None, None, None
        k, s = self.spec.window, self.spec.stride
        dy = np.ascontiguousarray(dy)
        if self.spec.kind == "max_pool":
            dxp = K.maxpool_backward(dy, cache, self.hp, self.wp, k, s)
        else:
            dxp = K.avgpool_backward(dy, self.count.astype(dy.dtype), self.hp, self.wp, k, s)
        return dxp[:, self.pt : self.pt + self.h, self.pl : self.pl + self.w, :], None, None


@dataclass
class _GlobalAvg:
    spec: LayerSpec
    h: int
    w: int

    def forward(self, x, W=None, b=None):
        return x.mean(axis=(1, 2)), None

    def backward(self, cache, W, dy, need_dx, per_example):
        if not need_dx:
            return None, None, None
        g = dy / (self.h * self.w)
        return np.broadcast_to(g[:, None, None, :], (dy.shape[0], self.h, self.w, dy.shape[1])), None, None


@functools.lru_cache(maxsize=64)
def _compile(net: NetworkSpec):
    layers = []
    for L, sin in zip(net.layers, net.shapes()):
        if L.kind == "conv2d":
            layers.append(_Conv(L, *sin))
        elif L.kind in ("max_pool", "avg_pool"):
            layers.append(_Pool(L, *sin))
        elif L.kind in ("dense", "softmax_output"):
            layers.append(_Dense(L, tuple(sin)))
        else:
            layers.append(_GlobalAvg(L, sin[0], sin[1]))
    return layers


def _check_batch(net, batch):
    if batch.ndim != len(net.input_shape) + 1 or batch.shape[1:] != net.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match input {net.input_shape}")


def _run_forward(net, theta, batch):
    _check_batch(net, batch)
    views = iter(param_views(net, theta))
    x = batch
    caches = []
    for L in _compile(net):
        W, b = next(views) if L.spec.has_params else (None, None)
        x, cache = L.forward(x, W, b)
        caches.append((cache, W, x))
    return x, caches


def forward(net: NetworkSpec, theta: np.ndarray, batch: np.ndarray, trace: bool = False):
    """Logits for ``batch``; with ``trace`` also the post-activation outputs.

    The trace is a list with one entry per layer (``None`` for layers that
    have no activation tag).
    """
    logits, caches = _run_forward(net, theta, np.asarray(batch))
    tr = None
    if trace:
        tr = [c[2] if L.has_params else None for L, c in zip(net.layers, caches)]
    return logits, tr


def first_conv_activation(net: NetworkSpec, theta, batch):
    """Post-activation output of the first conv layer, (B, H, W, F)."""
    L0 = _compile(net)[0]
    if L0.spec.kind != "conv2d":
        raise ShapeError("network does not start with a conv layer")
    W, b = param_views(net, theta)[0]
    return L0.forward(np.asarray(batch), W, b)[0]


# ---------------------------------------------------------------------------
# loss and gradients


def softmax_ce(logits: np.ndarray, labels: np.ndarray):
    """Per-example softmax cross-entropy and its gradient w.r.t. logits."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=1)
    idx = np.arange(logits.shape[0])
    loss = -logp[idx, labels]
    d = np.exp(logp)
    d[idx, labels] -= 1
    return loss, d


def loss_softmax_ce(logits, label: int):
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if k < 2 or not 0 <= label < k:
        raise ParameterError(f"need k >= 2 and 0 <= label < k, got k={k}, label={label}")
    loss, d = softmax_ce(logits.reshape(1, -1), np.array([label]))
    return float(loss[0]), d[0]


def _backward(net, theta, caches, dlogits, per_example, out=None):
    bsz = dlogits.shape[0]
    if out is None:
        shape = (bsz, net.num_params) if per_example else (net.num_params,)
        out = np.zeros(shape, dtype=theta.dtype)
    offsets = []
    off = 0
    for ws, bs in net.param_shapes():
        offsets.append(off)
        off += int(np.prod(ws)) + int(np.prod(bs))
    layers = _compile(net)
    pidx = sum(L.spec.has_params for L in layers)
    first_param = next(i for i, L in enumerate(layers) if L.spec.has_params)
    dy = dlogits
    for i in range(len(layers) - 1, -1, -1):
        L = layers[i]
        cache, W, _ = caches[i]
        dx, dW, db = L.backward(cache, W, dy, need_dx=i > first_param, per_example=per_example)
        if L.spec.has_params:
            pidx -= 1
            o = offsets[pidx]
            if per_example:
                out[:, o : o + W.size] = dW.reshape(bsz, -1)
                out[:, o + W.size : o + W.size + db.shape[-1]] = db
            else:
                out[o : o + W.size] = dW.reshape(-1)
                out[o + W.size : o + W.size + db.shape[-1]] = db
        dy = dx
    return out


def per_example_gradients(net: NetworkSpec, theta, examples, labels, return_loss=False):
    """(B, n) matrix; row i is the gradient of example i's own loss."""
    examples = np.asarray(examples)
    if examples.shape[0] == 0:
        raise ShapeError("per_example_gradients needs at least one example")
    logits, caches = _run_forward(net, theta, examples)
    loss, d = softmax_ce(logits, labels)
    g = _backward(net, theta, caches, d.astype(theta.dtype, copy=False), per_example=True)
    return (g, loss) if return_loss else g


def batch_gradient(net: NetworkSpec, theta, examples, labels, return_loss=False):
    """Gradient of the mean loss over the batch (no per-example split)."""
    logits, caches = _run_forward(net, theta, np.asarray(examples))
    loss, d = softmax_ce(logits, labels)
    d = (d / logits.shape[0]).astype(theta.dtype, copy=False)
    g = _backward(net, theta, caches, d, per_example=False)
    return (g, loss) if return_loss else g


def predict(net: NetworkSpec, theta, images, chunk: int = 1000) -> np.ndarray:
    out = []
    for i in range(0, images.shape[0], chunk):
        logits, _ = forward(net, theta, images[i : i + chunk])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def check_params(theta):
    check_finite(theta, what="parameters")
