"""Small numpy neural-network engine.

Activations are NHWC (batch, height, width, channels); conv kernels are stored
as (R, R, C, K) and dense weights as (in_features, out_features). Layers carry
no bias: every parameterized layer owns exactly one weight tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Raised when an input does not fit a layer."""


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    kind = "conv2d"

    @property
    def weight_shape(self):
        r = self.kernel_size
        return (r, r, self.in_channels, self.out_channels)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.in_channels:
            raise ShapeError(f"Conv2D expects (H, W, {self.in_channels}) input, got {tuple(in_shape)}")
        h, w, _ = in_shape
        r, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - r) // s + 1
        wo = (w + 2 * p - r) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2D kernel {r} does not fit input {tuple(in_shape)}")
        return (ho, wo, self.out_channels)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind = "dense"

    @property
    def weight_shape(self):
        return (self.in_features, self.out_features)

    @property
    def in_channels(self):
        # every input feature is its own 1x1 channel
        return self.in_features

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"Dense expects ({self.in_features},) input, got {tuple(in_shape)}")
        return (self.out_features,)


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int | None = None
    kind = "maxpool"

    @property
    def step(self):
        return self.stride or self.window

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"MaxPool expects (H, W, C) input, got {tuple(in_shape)}")
        h, w, c = in_shape
        ho = (h - self.window) // self.step + 1
        wo = (w - self.window) // self.step + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"MaxPool window {self.window} does not fit input {tuple(in_shape)}")
        return (ho, wo, c)


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


Layer = Union[Conv2D, Dense, ReLU, MaxPool, Flatten]
PARAM_KINDS = ("conv2d", "dense")


def is_param(layer) -> bool:
    return layer.kind in PARAM_KINDS


class Network:
    """Ordered layer list plus one weight tensor per parameterized layer.

    Stored weights are float32 and read-only; use :meth:`with_weights` to get a
    modified copy.
    """

    def __init__(self, layers: Sequence[Layer], weights: Sequence[np.ndarray], input_shape, num_classes=None):
        layers = tuple(layers)
        if not layers:
            raise ShapeError("network has no layers")
        self.layers = layers
        self.input_shape = tuple(int(d) for d in input_shape)
        shapes = [self.input_shape]
        for i, layer in enumerate(layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        self.shapes = shapes
        if len(shapes[-1]) != 1:
            raise ShapeError(f"network output must be flat logits, got shape {shapes[-1]}")
        self.num_classes = int(num_classes or shapes[-1][0])
        if self.num_classes != shapes[-1][0]:
            raise ShapeError("num_classes does not match the final layer width")

        self.param_layers = tuple(i for i, layer in enumerate(layers) if is_param(layer))
        weights = list(weights)
        if len(weights) != len(self.param_layers):
            raise ShapeError(
                f"expected {len(self.param_layers)} weight tensors, got {len(weights)}"
            )
        frozen = []
        for idx, w in zip(self.param_layers, weights):
            arr = np.array(w, dtype=np.float32, copy=True)
            if arr.shape != layers[idx].weight_shape:
                raise ShapeError(
                    f"layer {idx} weight shape {arr.shape} != {layers[idx].weight_shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"layer {idx} weights contain non-finite values")
            arr.flags.writeable = False
            frozen.append(arr)
        self.weights = tuple(frozen)

    def __repr__(self):
        kinds = ",".join(layer.kind for layer in self.layers)
        return f"Network(input={self.input_shape}, layers=[{kinds}], params={self.num_params})"

    @property
    def num_params(self) -> int:
        return int(sum(w.size for w in self.weights))

    def param_layer(self, p: int) -> Layer:
        return self.layers[self.param_layers[p]]

    def layer_input_shape(self, p: int):
        return self.shapes[self.param_layers[p]]

    def layer_output_shape(self, p: int):
        return self.shapes[self.param_layers[p] + 1]

    def channel_counts(self):
        """Input-channel count C of every parameterized layer."""
        return [self.param_layer(p).in_channels for p in range(len(self.param_layers))]

    def weights_per_channel(self):
        """Number of weights attached to one input channel (R*R*K, or K for dense)."""
        out = []
        for p, w in enumerate(self.weights):
            out.append(w.size // self.param_layer(p).in_channels)
        return out

    def flat_weights(self, dtype=np.float64) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights]).astype(dtype)

    def unflatten(self, vec) -> list[np.ndarray]:
        vec = np.asarray(vec)
        if vec.shape != (self.num_params,):
            raise ShapeError(f"flat vector length {vec.shape} != ({self.num_params},)")
        out, start = [], 0
        for w in self.weights:
            out.append(vec[start:start + w.size].reshape(w.shape))
            start += w.size
        return out

    def with_weights(self, weights) -> "Network":
        return Network(self.layers, weights, self.input_shape, self.num_classes)

    def with_flat_weights(self, vec) -> "Network":
        return self.with_weights(self.unflatten(vec))


# --------------------------------------------------------------------------
# layer kernels


def pad_nhwc(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def im2col(x, r, stride, padding):
    """Return (B*Ho*Wo, R*R*C) patch matrix, ordered (r_h, r_w, c) like the kernel."""
    xp = pad_nhwc(x, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (r, r), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, C, R, R)
    b, ho, wo, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, r * r * c)
    return cols, (b, ho, wo)


def col2im(dcols, x_shape, r, stride, padding):
    b, h, w, c = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - r) // stride + 1
    wo = (wp - r) // stride + 1
    d = dcols.reshape(b, ho, wo, r, r, c)
    dx = np.zeros((b, hp, wp, c), dtype=dcols.dtype)
    for i in range(r):
        for j in range(r):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i, j, :]
    if padding:
        dx = dx[:, padding:-padding, padding:-padding, :]
    return dx


def conv2d(x, w, stride=1, padding=0):
    r, _, c, k = w.shape
    cols, (b, ho, wo) = im2col(x, r, stride, padding)
    return (cols @ w.reshape(r * r * c, k)).reshape(b, ho, wo, k)


def _pool_windows(x, window, step):
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(1, 2))
    win = win[:, ::step, ::step]  # (B, Ho, Wo, C, win, win)
    b, ho, wo, c = win.shape[:4]
    return win.reshape(b, ho, wo, c, window * window)


def maxpool(x, window=2, step=2):
    return _pool_windows(x, window, step).max(axis=-1)


def maxpool_backward(x, dout, window, step):
    flat = _pool_windows(x, window, step)
    arg = flat.argmax(axis=-1)  # ties go to the first element
    b, ho, wo, c = arg.shape
    dx = np.zeros_like(x)
    ai, aj = np.divmod(arg, window)
    bi, hi, wi, ci = np.indices(arg.shape)
    np.add.at(dx, (bi, hi * step + ai, wi * step + aj, ci), dout)
    return dx


# --------------------------------------------------------------------------
# forward / backward


def _check_batch(net: Network, batch) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim == len(net.input_shape):
        x = x[None]
    if tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(
            f"layer 0 ({net.layers[0].kind}): batch shape {tuple(x.shape[1:])} != model input {net.input_shape}"
        )
    return x


def apply_layer(layer, x, w=None):
    if layer.kind == "conv2d":
        return conv2d(x, w, layer.stride, layer.padding)
    if layer.kind == "dense":
        return x @ w
    if layer.kind == "relu":
        return np.maximum(x, 0)
    if layer.kind == "maxpool":
        return maxpool(x, layer.window, layer.step)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def forward(net: Network, batch, weights=None, dtype=np.float32) -> np.ndarray:
    """Logits for ``batch``; ``weights`` optionally overrides the stored tensors."""
    x = _check_batch(net, batch).astype(dtype, copy=False)
    weights = net.weights if weights is None else weights
    p = 0
    for layer in net.layers:
        if is_param(layer):
            x = apply_layer(layer, x, np.asarray(weights[p], dtype=dtype))
            p += 1
        else:
            x = apply_layer(layer, x)
    return x


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss(net: Network, inputs, labels, weights=None, dtype=np.float64) -> float:
    return cross_entropy(forward(net, inputs, weights, dtype), np.asarray(labels))


def loss_and_grads(net: Network, inputs, labels, weights=None, dtype=np.float64):
    """Mean softmax cross-entropy and its gradient per weight tensor."""
    x = _check_batch(net, inputs).astype(dtype, copy=False)
    labels = np.asarray(labels)
    weights = net.weights if weights is None else weights
    ws = [np.asarray(w, dtype=dtype) for w in weights]

    cache = []
    p = 0
    for layer in net.layers:
        if is_param(layer):
            cache.append(x)
            x = apply_layer(layer, x, ws[p])
            p += 1
        else:
            cache.append(x)
            x = apply_layer(layer, x)

    n = len(labels)
    probs = softmax(x)
    z = x - x.max(axis=1, keepdims=True)
    value = float(-(z[np.arange(n), labels] - np.log(np.exp(z).sum(axis=1))).mean())
    d = probs
    d[np.arange(n), labels] -= 1.0
    d /= n

    grads = [None] * len(ws)
    p = len(ws) - 1
    for depth, layer, xin in zip(range(len(net.layers) - 1, -1, -1), reversed(net.layers), reversed(cache)):
        if layer.kind == "dense":
            grads[p] = xin.T @ d
            d = d @ ws[p].T
            p -= 1
        elif layer.kind == "conv2d":
            w = ws[p]
            r, _, c, k = w.shape
            cols, _ = im2col(xin, r, layer.stride, layer.padding)
            dflat = d.reshape(-1, k)
            grads[p] = (cols.T @ dflat).reshape(w.shape)
            if depth == 0:
                break
            d = col2im(dflat @ w.reshape(-1, k).T, xin.shape, r, layer.stride, layer.padding)
            p -= 1
        elif layer.kind == "relu":
            d = d * (xin > 0)
        elif layer.kind == "maxpool":
            d = maxpool_backward(xin, d, layer.window, layer.step)
        elif layer.kind == "flatten":
            d = d.reshape(xin.shape)
    return value, grads


def gradient(net: Network, data, weights=None) -> np.ndarray:
    """Flat float64 gradient of the mean cross-entropy over ``data``."""
    inputs, labels = _unpack(data)
    if len(labels) == 0:
        raise ValueError("gradient needs a non-empty dataset")
    _, grads = loss_and_grads(net, inputs, labels, weights)
    return np.concatenate([g.ravel() for g in grads])


def hvp(net: Network, data, v, eps: float = 1e-5) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient.

    The step is ``eps / ||v||`` along ``v`` so the probe radius is ``eps``
    regardless of the vector's scale.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.num_params,):
        raise ShapeError(f"vector length {v.shape} != ({net.num_params},)")
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.zeros_like(v)
    h = eps / norm
    w0 = net.flat_weights()
    g_plus = gradient(net, data, net.unflatten(w0 + h * v))
    g_minus = gradient(net, data, net.unflatten(w0 - h * v))
    return (g_plus - g_minus) / (2 * h)


def predict(net: Network, inputs, weights=None, batch_size=2048) -> np.ndarray:
    x = _check_batch(net, inputs)
    out = [forward(net, x[i:i + batch_size], weights).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, data, weights=None) -> float:
    """Top-1 accuracy; ``argmax`` breaks ties toward the lowest class index."""
    inputs, labels = _unpack(data)
    if len(labels) == 0:
        raise ValueError("accuracy needs a non-empty dataset")
    return float(np.mean(predict(net, inputs, weights) == labels))


def _unpack(data):
    if hasattr(data, "inputs"):
        return data.inputs, np.asarray(data.labels)
    inputs, labels = data
    return inputs, np.asarray(labels)
