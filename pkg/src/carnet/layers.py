"""Stateful layers with explicit forward/backward passes.

A layer caches whatever its backward pass needs during a training-mode forward
and accumulates parameter gradients into ``Tensor.grad``.  Layers also
describe themselves for complexity accounting (``describe``), propagating a
``(C, H, W)`` shape without touching any data.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import kernels, ops
from .tensor import DTYPE, ShapeError, Tensor


class StateError(RuntimeError):
    """Raised when a layer is used in a state it does not support."""


class NumericError(FloatingPointError):
    """Raised when a non-finite activation is detected."""

    def __init__(self, layer: str):
        super().__init__(f"non-finite activation produced by layer '{layer}'")
        self.layer = layer


@dataclass(frozen=True)
class LayerDescriptor:
    """Static description of one layer at a given input size."""

    name: str
    kind: str  # conv | deconv | bn | pool | activation | add | concat | upsample
    k_w: int | None = None
    k_h: int | None = None
    c_in: int | None = None
    c_out: int | None = None
    stride: int | tuple[int, int] | None = None
    has_bias: bool = False
    out_w: int | None = None
    out_h: int | None = None
    window: int | None = None


def _param(shape) -> Tensor:
    t = Tensor(np.zeros(shape, dtype=DTYPE))
    t.zero_grad()
    return t


def _vec(t: Tensor) -> np.ndarray:
    return t.data.reshape(-1)


class Module:
    """Base class: parameter/buffer registry, train/eval switching."""

    def __init__(self):
        self.training = True

    # subclasses override these three
    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def own_params(self) -> list[tuple[str, Tensor]]:
        return []

    def own_buffers(self) -> list[tuple[str, Tensor | None]]:
        return []

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.own_params():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor | None]]:
        for name, b in self.own_buffers():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for cname, child in self.children():
            yield from child.modules(f"{prefix}{cname}.")

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        flat = getattr(self, "_flat", None)
        if flat is not None:
            flat[1].fill(0.0)
            return
        for _, p in self.named_parameters():
            p.zero_grad()

    def flatten_parameters(self) -> tuple[np.ndarray, np.ndarray]:
        """Move all parameters and gradients into two contiguous float32 buffers.

        Each ``Tensor.data``/``Tensor.grad`` becomes a view into the buffers, so
        optimizers can update every parameter with a single vectorized pass.
        """
        params = [p for _, p in self.named_parameters()]
        total = sum(p.size for p in params)
        data = np.empty(total, dtype=DTYPE)
        grad = np.zeros(total, dtype=DTYPE)
        off = 0
        for p in params:
            k = p.size
            data[off:off + k] = p.data.reshape(-1)
            p.data = data[off:off + k].reshape(p.shape)
            p.grad = grad[off:off + k].reshape(p.shape)
            off += k
        self._flat = (data, grad)
        return self._flat

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def describe(self, shape, name: str) -> tuple[list[LayerDescriptor], tuple[int, int, int]]:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, stride=1, pad=0, bias=True):
        super().__init__()
        self.kh, self.kw = ops._pair(kernel)
        self.stride = ops._pair(stride)
        self.pad = ops._pair(pad)
        self.c_in, self.c_out = c_in, c_out
        self.weight = _param((c_out, c_in, self.kh, self.kw))
        self.bias = _param((1, c_out, 1, 1)) if bias else None
        self._cache = None

    def own_params(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def forward(self, x):
        b = None if self.bias is None else _vec(self.bias)
        y, cols = ops.conv2d_forward(x, self.weight.data, b, self.stride, self.pad)
        self._cache = (x.shape, cols) if self.training else None
        return y

    def backward(self, g, need_dx=True):
        if self._cache is None:
            raise StateError("Conv2d.backward called without a training-mode forward")
        x_shape, cols = self._cache
        dx, dw, db = ops.conv2d_backward(g, x_shape, cols, self.weight.data, self.stride, self.pad, need_dx)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db.reshape(self.bias.shape)
        self._cache = None
        return dx

    def describe(self, shape, name):
        c, h, w = shape
        if c != self.c_in:
            raise ShapeError(f"{name}: expected {self.c_in} input channels, got {c}")
        ho = ops.conv_out_size(h, self.kh, self.stride[0], self.pad[0])
        wo = ops.conv_out_size(w, self.kw, self.stride[1], self.pad[1])
        d = LayerDescriptor(name, "conv", self.kw, self.kh, self.c_in, self.c_out,
                            self.stride[0] if self.stride[0] == self.stride[1] else self.stride,
                            self.bias is not None, wo, ho)
        return [d], (self.c_out, ho, wo)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, stride=1, pad=0, output_padding=0, bias=True):
        super().__init__()
        self.k = int(kernel)
        self.stride, self.pad, self.output_padding = int(stride), int(pad), int(output_padding)
        if self.output_padding >= self.stride:
            raise ValueError(f"output_padding {output_padding} must be smaller than stride {stride}")
        self.c_in, self.c_out = c_in, c_out
        self.weight = _param((c_in, c_out, self.k, self.k))
        self.bias = _param((1, c_out, 1, 1)) if bias else None
        self._x = None

    def own_params(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def forward(self, x):
        b = None if self.bias is None else _vec(self.bias)
        y = ops.deconv2d_forward(x, self.weight.data, b, self.stride, self.pad, self.output_padding)
        self._x = x if self.training else None
        return y

    def backward(self, g, need_dx=True):
        if self._x is None:
            raise StateError("ConvTranspose2d.backward called without a training-mode forward")
        dx, dw, db = ops.deconv2d_backward(g, self._x, self.weight.data, self.stride, self.pad, need_dx)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db.reshape(self.bias.shape)
        self._x = None
        return dx

    def describe(self, shape, name):
        c, h, w = shape
        if c != self.c_in:
            raise ShapeError(f"{name}: expected {self.c_in} input channels, got {c}")
        ho = ops.deconv_out_size(h, self.k, self.stride, self.pad, self.output_padding)
        wo = ops.deconv_out_size(w, self.k, self.stride, self.pad, self.output_padding)
        d = LayerDescriptor(name, "deconv", self.k, self.k, self.c_in, self.c_out, self.stride,
                            self.bias is not None, wo, ho)
        return [d], (self.c_out, ho, wo)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.c, self.momentum, self.eps = c, momentum, eps
        self.gamma = _param((1, c, 1, 1))
        self.gamma.data.fill(1.0)
        self.beta = _param((1, c, 1, 1))
        # None until initialised by reset_running_stats() or a training forward
        self.running_mean: Tensor | None = None
        self.running_var: Tensor | None = None
        self._cache = None

    def own_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def reset_running_stats(self):
        self.running_mean = Tensor(np.zeros((1, self.c, 1, 1), dtype=DTYPE))
        self.running_var = Tensor(np.ones((1, self.c, 1, 1), dtype=DTYPE))

    def forward(self, x):
        if x.shape[1] != self.c:
            raise ShapeError(f"BatchNorm2d: expected {self.c} channels, got {x.shape[1]}")
        gamma, beta = _vec(self.gamma), _vec(self.beta)
        if self.training:
            y, mean, var, cache = ops.batchnorm_train_forward(x, gamma, beta, self.eps)
            if self.running_mean is None:
                self.reset_running_stats()
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (m / max(m - 1, 1))
            rm, rv = self.running_mean.data.reshape(-1), self.running_var.data.reshape(-1)
            rm *= 1.0 - self.momentum
            rm += self.momentum * mean.astype(DTYPE)
            rv *= 1.0 - self.momentum
            rv += self.momentum * unbiased.astype(DTYPE)
            self._cache = cache
            return y
        if self.running_mean is None or self.running_var is None:
            raise StateError("BatchNorm2d in eval mode has uninitialised running statistics")
        self._cache = None
        return ops.batchnorm_eval_forward(x, gamma, beta, _vec(self.running_mean),
                                          _vec(self.running_var), self.eps)

    def backward(self, g):
        if self._cache is None:
            raise StateError("BatchNorm2d.backward called without a training-mode forward")
        dx, dgamma, dbeta = ops.batchnorm_train_backward(g, _vec(self.gamma), self._cache)
        self.gamma.grad += dgamma.reshape(self.gamma.shape)
        self.beta.grad += dbeta.reshape(self.beta.shape)
        self._cache = None
        return dx

    def describe(self, shape, name):
        c, h, w = shape
        return [LayerDescriptor(name, "bn", c_in=c, c_out=c, out_w=w, out_h=h)], shape


class ReLU(Module):
    """ReLU; ``inplace=True`` overwrites the forward input and the incoming gradient."""

    def __init__(self, inplace=False):
        super().__init__()
        self.inplace = inplace
        self._y = None

    def forward(self, x):
        y = np.maximum(x, 0, out=x) if self.inplace else ops.relu_forward(x)
        self._y = y if self.training else None  # y > 0 exactly where x > 0
        return y

    def backward(self, g):
        if self._y is None:
            raise StateError("ReLU.backward called without a training-mode forward")
        if self.inplace and g.flags.c_contiguous and g.dtype == self._y.dtype:
            dx = kernels.relu_backward_(g, self._y)
        else:
            dx = ops.relu_backward(g, self._y)
        self._y = None
        return dx

    def describe(self, shape, name):
        c, h, w = shape
        return [LayerDescriptor(name, "activation", c_in=c, c_out=c, out_w=w, out_h=h)], shape


class Sigmoid(Module):
    def __init__(self):
        super().__init__()
        self._y = None

    def forward(self, x):
        y = ops.sigmoid(x)
        self._y = y if self.training else None
        return y

    def backward(self, g):
        return ops.sigmoid_backward(g, self._y)

    def describe(self, shape, name):
        c, h, w = shape
        return [LayerDescriptor(name, "activation", c_in=c, c_out=c, out_w=w, out_h=h)], shape


class MaxPool2(Module):
    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x):
        y, idx = ops.maxpool2_forward(x)
        self._cache = (idx, x.shape) if self.training else None
        return y

    def backward(self, g):
        idx, shape = self._cache
        self._cache = None
        return ops.maxpool2_backward(g, idx, shape)

    def describe(self, shape, name):
        c, h, w = shape
        ho, wo = h // 2, w // 2
        return [LayerDescriptor(name, "pool", 2, 2, c, c, 2, False, wo, ho, window=4)], (c, ho, wo)


class BilinearUpsample(Module):
    def __init__(self, factor: int):
        super().__init__()
        self.factor = int(factor)
        self._shape = None

    def forward(self, x):
        self._shape = x.shape if self.training else None
        return ops.bilinear_forward(x, self.factor)

    def backward(self, g):
        return ops.bilinear_backward(g, self._shape)

    def describe(self, shape, name):
        c, h, w = shape
        ho, wo = h * self.factor, w * self.factor
        return [LayerDescriptor(name, "upsample", c_in=c, c_out=c, stride=self.factor,
                                out_w=wo, out_h=ho, window=4)], (c, ho, wo)


class Sequential(Module):
    def __init__(self, *layers: tuple[str, Module]):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def describe(self, shape, name):
        rows = []
        for lname, layer in self.layers:
            r, shape = layer.describe(shape, f"{name}.{lname}")
            rows += r
        return rows, shape
