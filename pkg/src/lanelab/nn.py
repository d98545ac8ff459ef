"""Minimal dense/conv networks with exact reverse-mode gradients, numpy only.

Parameters default to float64 for test determinism; pass dtype=np.float32 to
builders for faster training runs.  A single network instance is mutated by
one trainer at a time; copy.deepcopy gives an independent clone.
"""

from __future__ import annotations

import copy
import json
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Layer:
    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def params(self):
        return []

    def grads(self):
        return []


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float64, init_scale: Optional[float] = None):
        scale = init_scale if init_scale is not None else np.sqrt(2.0 / n_in)
        self.W = (rng.normal(0.0, scale, (n_out, n_in))).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, grad):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self.gW += grad.T @ self._x
        self.gb += grad.sum(axis=0)
        return grad @ self.W

    def params(self):
        return [self.W, self.b]

    def grads(self):
        return [self.gW, self.gb]


class Conv2d(Layer):
    """Valid-padding 2D convolution over (B, C, H, W) input via im2col."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 rng: np.random.Generator, dtype=np.float64):
        fan_in = c_in * kernel * kernel
        self.W = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                            (c_out, c_in, kernel, kernel)).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self.kernel = kernel
        self.stride = stride
        self._cols = None
        self._x_shape = None

    def _im2col(self, x):
        B, C, H, W = x.shape
        k, s = self.kernel, self.stride
        oh = (H - k) // s + 1
        ow = (W - k) // s + 1
        sB, sC, sH, sW = x.strides
        view = as_strided(x, shape=(B, C, oh, ow, k, k),
                          strides=(sB, sC, sH * s, sW * s, sH, sW))
        return view.transpose(0, 2, 3, 1, 4, 5).reshape(B * oh * ow, C * k * k), oh, ow

    def forward(self, x):
        self._x_shape = x.shape
        cols, oh, ow = self._im2col(x)
        self._cols = cols
        out = cols @ self.W.reshape(len(self.W), -1).T + self.b
        B = x.shape[0]
        return out.reshape(B, oh, ow, len(self.W)).transpose(0, 3, 1, 2)

    def backward(self, grad):
        if self._cols is None:
            raise RuntimeError("backward called before forward")
        B, c_out, oh, ow = grad.shape
        gmat = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
        self.gW += (gmat.T @ self._cols).reshape(self.W.shape)
        self.gb += gmat.sum(axis=0)
        gcols = gmat @ self.W.reshape(c_out, -1)
        gx = np.zeros(self._x_shape, dtype=grad.dtype)
        k, s = self.kernel, self.stride
        C = self._x_shape[1]
        gview = gcols.reshape(B, oh, ow, C, k, k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + s * oh:s, j:j + s * ow:s] += \
                    gview[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx

    def params(self):
        return [self.W, self.b]

    def grads(self):
        return [self.gW, self.gb]


class Relu(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Tanh(Layer):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad):
        return grad * (1.0 - self._y ** 2)


class Sigmoid(Layer):
    def forward(self, x):
        self._y = 1.0 / (1.0 + np.exp(-x))
        return self._y

    def backward(self, grad):
        return grad * self._y * (1.0 - self._y)


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Sequential:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def zero_grads(self):
        for g in self.grads():
            g[...] = 0.0

    def __call__(self, x):
        return self.forward(x)


class TwoBranchNet:
    """Conv branch over a grid stack, concatenated with a low-dim vector.

    forward(grid, vec) runs the conv branch (ending in Flatten), joins the
    vector, and applies the dense head.  backward returns (grid_grad, vec_grad).
    """

    def __init__(self, conv: Sequential, head: Sequential, vec_dim: int):
        self.conv = conv
        self.head = head
        self.vec_dim = vec_dim

    def forward(self, grid, vec):
        h = self.conv.forward(grid)
        self._split = h.shape[1]
        z = np.concatenate([h, vec], axis=1)
        return self.head.forward(z)

    def backward(self, grad):
        gz = self.head.backward(grad)
        ggrid = self.conv.backward(gz[:, :self._split])
        return ggrid, gz[:, self._split:]

    def params(self):
        return self.conv.params() + self.head.params()

    def grads(self):
        return self.conv.grads() + self.head.grads()

    def zero_grads(self):
        self.conv.zero_grads()
        self.head.zero_grads()

    def __call__(self, grid, vec):
        return self.forward(grid, vec)


ACTIVATIONS = {"relu": Relu, "tanh": Tanh, "sigmoid": Sigmoid}


def mlp(sizes: Sequence[int], rng: np.random.Generator, hidden="relu",
        out: Optional[str] = None, dtype=np.float64,
        final_init_scale: Optional[float] = None) -> Sequential:
    """Dense stack: sizes = [in, h1, ..., out]; linear output unless `out` given."""
    layers = []
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        layers.append(Dense(sizes[i], sizes[i + 1], rng, dtype=dtype,
                            init_scale=final_init_scale if last else None))
        if not last:
            layers.append(ACTIVATIONS[hidden]())
        elif out is not None:
            layers.append(ACTIVATIONS[out]())
    return Sequential(layers)


def init_final_uniform(net: Sequential, rng: np.random.Generator, bound: float = 1e-3):
    """Re-initialize the last Dense layer with U(-bound, bound) weights, zero bias."""
    for layer in reversed(net.layers):
        if isinstance(layer, Dense):
            layer.W[...] = rng.uniform(-bound, bound, layer.W.shape).astype(layer.W.dtype)
            layer.b[...] = 0.0
            return
    raise ValueError("network has no Dense layer")


def grid_trunk(grid_shape, vec_dim: int, out_dim: int, rng: np.random.Generator,
               conv_channels=(8, 16), dense=(128, 64), dtype=np.float64,
               out: Optional[str] = None) -> TwoBranchNet:
    """Standard observation trunk: two stride-2 convs, flatten, dense head."""
    c, h, w = grid_shape
    conv_layers = []
    ch = c
    k_sizes = (4, 3)
    oh, ow = h, w
    for c_out, k in zip(conv_channels, k_sizes):
        conv_layers += [Conv2d(ch, c_out, k, 2, rng, dtype=dtype), Relu()]
        oh = (oh - k) // 2 + 1
        ow = (ow - k) // 2 + 1
        ch = c_out
    conv_layers.append(Flatten())
    flat = ch * oh * ow
    head = mlp([flat + vec_dim, *dense, out_dim], rng, dtype=dtype, out=out)
    return TwoBranchNet(Sequential(conv_layers), head, vec_dim)


def soft_update(target, source, tau: float) -> None:
    """Polyak update: target <- tau * source + (1 - tau) * target."""
    tp, sp = target.params(), source.params()
    if len(tp) != len(sp):
        raise ValueError("network architectures do not match")
    for t, s in zip(tp, sp):
        if t.shape != s.shape:
            raise ValueError(f"parameter shape mismatch {t.shape} vs {s.shape}")
        t *= (1.0 - tau)
        t += tau * s


def clone(net):
    return copy.deepcopy(net)


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr
        self.step_count = 0

    def step(self, net) -> None:
        for p, g in zip(net.params(), net.grads()):
            p -= self.lr * g
        net.zero_grads()
        self.step_count += 1


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = None
        self._v = None

    def step(self, net) -> None:
        params, grads = net.params(), net.grads()
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
        net.zero_grads()


# --- checkpointing -----------------------------------------------------------

CHECKPOINT_MAGIC = "lanelab-checkpoint"


def save_checkpoint(path, nets: dict) -> None:
    """Header line with parameter layout, then raw little-endian arrays."""
    entries = []
    blobs = []
    for name, net in nets.items():
        for i, p in enumerate(net.params()):
            arr = np.ascontiguousarray(p)
            entries.append({"name": f"{name}.{i}", "shape": list(arr.shape),
                            "dtype": str(arr.dtype)})
            blobs.append(arr.tobytes())
    header = {"format": CHECKPOINT_MAGIC, "version": 1, "entries": entries}
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode())
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path, nets: dict) -> None:
    """Load parameters into existing nets; layout must match bit-exactly."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        expected = []
        for name, net in nets.items():
            for i, p in enumerate(net.params()):
                expected.append((f"{name}.{i}", p))
        if len(expected) != len(header["entries"]):
            raise ValueError("checkpoint entry count mismatch")
        for (name, p), entry in zip(expected, header["entries"]):
            if entry["name"] != name or tuple(entry["shape"]) != p.shape:
                raise ValueError(f"checkpoint layout mismatch at {name}")
            raw = f.read(np.dtype(entry["dtype"]).itemsize * int(np.prod(p.shape)))
            p[...] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(p.shape)
