"""Minimal feed-forward network with hand-derived gradients.

Layers: valid 2-D convolution, dense, relu, 2x2 max pooling, batch norm
(with running stats), flatten. The network ends in a softmax over the last
dense layer's logits. No autodiff tape: each layer implements its own
backward pass, checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CongruenceError, ShapeError
from .tensors import ParamEntry, ParameterSet

_LOG_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# Layers


class Layer:
    """Base layer. Parameters live in `params`; gradients in `grads`."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}  # non-trainable state

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Valid cross-correlation, stride 1. Weight shape [out_ch, in_ch, kh, kw]."""

    def __init__(self, out_ch: int, in_ch: int, kh: int, kw: int, rng=None):
        super().__init__()
        fan_in = in_ch * kh * kw
        scale = np.sqrt(2.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = rng.normal(0.0, scale, (out_ch, in_ch, kh, kw))
        self.params["bias"] = np.zeros(out_ch)
        self.kh, self.kw = kh, kw

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        kh, kw = self.kh, self.kw
        oh, ow = h - kh + 1, w - kw + 1
        s0, s1, s2, s3 = x.strides
        cols = np.lib.stride_tricks.as_strided(
            x, (n, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2, s3)
        )
        return np.ascontiguousarray(cols).reshape(n, c * kh * kw, oh * ow)

    def forward(self, x, train):
        w = self.params["weight"]
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv input shape {x.shape} incompatible with {w.shape}")
        if x.shape[2] < self.kh or x.shape[3] < self.kw:
            raise ShapeError("conv input smaller than kernel")
        n, _, h, w_in = x.shape
        oh, ow = h - self.kh + 1, w_in - self.kw + 1
        cols = self._im2col(x)
        wf = w.reshape(w.shape[0], -1)
        y = np.matmul(wf, cols) + self.params["bias"][None, :, None]
        if train:
            self._cache = (x.shape, cols)
        return y.reshape(n, w.shape[0], oh, ow)

    def backward(self, dy):
        x_shape, cols = self._cache
        n, c, h, w_in = x_shape
        w = self.params["weight"]
        out_ch = w.shape[0]
        oh, ow = h - self.kh + 1, w_in - self.kw + 1
        dyf = dy.reshape(n, out_ch, oh * ow)
        self.grads["weight"] = (
            np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        )
        self.grads["bias"] = dyf.sum(axis=(0, 2))
        wf = w.reshape(out_ch, -1)
        dcols = np.matmul(wf.T, dyf).reshape(n, c, self.kh, self.kw, oh, ow)
        dx = np.zeros(x_shape)
        for i in range(self.kh):
            for j in range(self.kw):
                dx[:, :, i : i + oh, j : j + ow] += dcols[:, :, i, j]
        return dx


class Dense(Layer):
    """Affine map. Weight shape [out, in]."""

    def __init__(self, in_dim: int, out_dim: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / in_dim)
        self.params["weight"] = rng.normal(0.0, scale, (out_dim, in_dim))
        self.params["bias"] = np.zeros(out_dim)

    def forward(self, x, train):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"dense input shape {x.shape} incompatible with {w.shape}")
        if train:
            self._cache = x
        return x @ w.T + self.params["bias"]

    def backward(self, dy):
        x = self._cache
        self.grads["weight"] = dy.T @ x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]


class ReLU(Layer):
    def forward(self, x, train):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dy):
        return dy * self._cache


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; trailing odd row/column is dropped."""

    def forward(self, x, train):
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        if oh == 0 or ow == 0:
            raise ShapeError(f"input {x.shape} too small for 2x2 pooling")
        v = x[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2)
        windows = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
        idx = windows.argmax(axis=-1)
        if train:
            self._cache = (x.shape, idx)
        return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        x_shape, idx = self._cache
        n, c, h, w = x_shape
        oh, ow = h // 2, w // 2
        dwin = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros(x_shape)
        dx[:, :, : 2 * oh, : 2 * ow] = (
            dwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        ).reshape(n, c, 2 * oh, 2 * ow)
        return dx


class Flatten(Layer):
    def forward(self, x, train):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._cache)


class BatchNorm(Layer):
    """Per-channel batch normalization with running statistics.

    Works on conv feature maps [n, c, h, w] and dense activations [n, c].
    Training uses batch statistics; eval uses the running estimates. The
    running stats are exported as non-trainable batchnorm-flagged entries.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    @staticmethod
    def _axes(x):
        if x.ndim == 4:
            return (0, 2, 3)
        if x.ndim == 2:
            return (0,)
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.ndim}-D")

    def _expand(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, train):
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.buffers["running_mean"] = (
                (1 - self.momentum) * self.buffers["running_mean"]
                + self.momentum * mean
            )
            self.buffers["running_var"] = (
                (1 - self.momentum) * self.buffers["running_var"]
                + self.momentum * var
            )
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._expand(mean, x.ndim)) * self._expand(inv_std, x.ndim)
        y = self._expand(self.params["gamma"], x.ndim) * xhat + self._expand(
            self.params["beta"], x.ndim
        )
        if train:
            self._cache = (x, xhat, mean, inv_std, axes)
        return y

    def backward(self, dy):
        x, xhat, mean, inv_std, axes = self._cache
        m = np.prod([x.shape[a] for a in axes])
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        gamma = self._expand(self.params["gamma"], x.ndim)
        istd = self._expand(inv_std, x.ndim)
        dxhat = dy * gamma
        sum_dxhat = self._expand(dxhat.sum(axis=axes), x.ndim)
        sum_dxhat_xhat = self._expand((dxhat * xhat).sum(axis=axes), x.ndim)
        return (istd / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)


# ---------------------------------------------------------------------------
# Network


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Network:
    """Ordered layer stack ending in softmax over the last layer's logits."""

    def __init__(self, layers: Sequence[Tuple[str, Layer]]):
        names = [n for n, _ in layers]
        if len(set(names)) != len(names):
            raise CongruenceError("duplicate layer names")
        self.layers: List[Tuple[str, Layer]] = list(layers)

    def forward(self, batch: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        for _, layer in self.layers:
            x = layer.forward(x, train)
        if x.ndim != 2:
            raise ShapeError("network must end in a 2-D logit matrix")
        return _softmax(x)

    def backward_from_logits(self, dlogits: np.ndarray) -> None:
        dy = dlogits
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy)

    # -- parameter plumbing ------------------------------------------------

    def _entries(self, source: str) -> List[ParamEntry]:
        entries = []
        for lname, layer in self.layers:
            is_bn = isinstance(layer, BatchNorm)
            for pname in layer.params:
                value = (
                    layer.params[pname]
                    if source != "grads"
                    else layer.grads.get(pname, np.zeros_like(layer.params[pname]))
                )
                kind = "conv4d" if value.ndim == 4 else (
                    "matrix2d" if value.ndim == 2 else "vector1d"
                )
                entries.append(
                    ParamEntry(f"{lname}.{pname}", value.copy(), kind, is_bn, True)
                )
            for bname, bval in layer.buffers.items():
                value = bval if source != "grads" else np.zeros_like(bval)
                entries.append(
                    ParamEntry(f"{lname}.{bname}", value.copy(), "vector1d", is_bn, False)
                )
        return entries

    def parameters(self) -> ParameterSet:
        return ParameterSet(self._entries("params"))

    def gradients(self) -> ParameterSet:
        return ParameterSet(self._entries("grads"))

    def import_parameters(self, ps: ParameterSet) -> None:
        self.parameters().require_congruent(ps)
        for lname, layer in self.layers:
            for pname in layer.params:
                layer.params[pname] = ps.get(f"{lname}.{pname}").tensor.copy()
            for bname in layer.buffers:
                layer.buffers[bname] = ps.get(f"{lname}.{bname}").tensor.copy()


# ---------------------------------------------------------------------------
# Losses and training step


def cross_entropy(probs: np.ndarray, labels: Sequence[int]) -> float:
    """Mean negative log-likelihood; probabilities clamped at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, _LOG_CLAMP)).mean())


def kl_divergence(teacher: np.ndarray, student: np.ndarray) -> float:
    """Mean over the batch of sum_k teacher * log(teacher/student).

    The teacher distribution is a constant with respect to differentiation.
    """
    t = np.maximum(teacher, _LOG_CLAMP)
    s = np.maximum(student, _LOG_CLAMP)
    per_sample = (teacher * (np.log(t) - np.log(s))).sum(axis=1)
    return float(per_sample.mean())


def backward(
    net: Network,
    batch: np.ndarray,
    labels: Sequence[int],
    teacher_probs: Optional[np.ndarray] = None,
) -> Tuple[ParameterSet, np.ndarray]:
    """Gradients of CE (plus KL(teacher || net) when a teacher is given).

    Returns (gradient set, forward probabilities). The softmax/CE/KL logit
    gradient is (p - onehot)/n plus (p - teacher)/n for the KL term.
    """
    labels = np.asarray(labels, dtype=np.int64)
    probs = net.forward(batch, train=True)
    n = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    if teacher_probs is not None:
        dlogits += probs - teacher_probs
    dlogits /= n
    net.backward_from_logits(dlogits)
    return net.gradients(), probs


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: lr(epoch) = initial * 0.5 ** (epoch // halve_every)."""

    initial: float = 3e-3
    halve_every: int = 30

    def __post_init__(self):
        if self.initial <= 0 or self.halve_every < 1:
            raise ShapeError("learning-rate schedule requires initial>0, halve_every>=1")

    def at(self, epoch: int) -> float:
        return self.initial * 0.5 ** (epoch // self.halve_every)


def sgd_step(
    net: Network,
    grads: ParameterSet,
    epoch: int,
    sch: LrSchedule,
    prox: Optional[Tuple[float, ParameterSet]] = None,
) -> None:
    """w <- w - lr(epoch) * (g + mu * (w - anchor)); buffers are untouched."""
    params = net.parameters()
    params.require_congruent(grads)
    lr = sch.at(epoch)
    mu, anchor = (0.0, None) if prox is None else prox
    if anchor is not None:
        params.require_congruent(anchor)
    for lname, layer in net.layers:
        for pname in layer.params:
            full = f"{lname}.{pname}"
            g = grads.get(full).tensor
            w = layer.params[pname]
            if mu != 0.0 and anchor is not None:
                g = g + mu * (w - anchor.get(full).tensor)
            layer.params[pname] = w - lr * g


# ---------------------------------------------------------------------------
# Architectures


def build_network(
    arch: str,
    in_channels: int,
    height: int,
    width: int,
    classes: int,
    rng,
) -> Network:
    """Construct a named architecture with seeded initialization."""
    if arch == "tiny_mlp":
        return Network(
            [
                ("flatten", Flatten()),
                ("fc1", Dense(in_channels * height * width, 16, rng)),
                ("relu1", ReLU()),
                ("fc2", Dense(16, classes, rng)),
            ]
        )
    if arch in ("smallcnn", "smallcnn_bn"):
        with_bn = arch == "smallcnn_bn"
        layers: List[Tuple[str, Layer]] = []
        layers.append(("conv1", Conv2d(8, in_channels, 3, 3, rng)))
        if with_bn:
            layers.append(("bn1", BatchNorm(8)))
        layers.append(("relu1", ReLU()))
        layers.append(("pool1", MaxPool2x2()))
        layers.append(("conv2", Conv2d(16, 8, 3, 3, rng)))
        if with_bn:
            layers.append(("bn2", BatchNorm(16)))
        layers.append(("relu2", ReLU()))
        layers.append(("pool2", MaxPool2x2()))
        layers.append(("flatten", Flatten()))
        h = ((height - 2) // 2 - 2) // 2
        w = ((width - 2) // 2 - 2) // 2
        if h < 1 or w < 1:
            raise ShapeError(f"input {height}x{width} too small for smallcnn")
        layers.append(("fc1", Dense(16 * h * w, 64, rng)))
        layers.append(("relu3", ReLU()))
        layers.append(("fc2", Dense(64, classes, rng)))
        return Network(layers)
    raise ShapeError(f"unknown architecture {arch!r}")
