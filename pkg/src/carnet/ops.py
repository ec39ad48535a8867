"""Forward and backward passes of the primitive operations.

All functions take and return plain ``numpy`` arrays in NCHW layout and work in
whatever floating dtype they are given (float32 in training, float64 in the
gradient checks).  Convolutions use cross-correlation, i.e. no kernel flip.

Transposed-convolution weights are stored as ``(C_in, C_out, K_h, K_w)``: the
weight of the ordinary convolution (``C_out -> C_in``) whose data gradient the
transposed convolution computes.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_out_size(size: int, k: int, stride: int, pad: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * pad + k + output_padding


# -- convolution -------------------------------------------------------------

def conv2d_forward(x, w, b=None, stride=1, pad=0):
    """Returns ``(y, cols)``; ``cols`` is the patch matrix needed by the backward pass."""
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {ci}")
    ho, wo = conv_out_size(h, kh, sh, ph), conv_out_size(wd, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {(kh, kw)} stride {(sh, sw)} pad {(ph, pw)}")
    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        cols = np.ascontiguousarray(x).reshape(n, c, h * wd)
    else:
        cols = kernels.im2col(x, kh, kw, sh, sw, ph, pw)
    y = np.matmul(w.reshape(co, -1), cols).reshape(n, co, ho, wo)
    if b is not None:
        y += b.reshape(1, co, 1, 1)
    return y, cols


def conv2d_backward(g, x_shape, cols, w, stride=1, pad=0, need_dx=True):
    """Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false."""
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    n = g.shape[0]
    co, ci, kh, kw = w.shape
    g2 = np.ascontiguousarray(g).reshape(n, co, -1)
    # dW^T = cols @ g^T: this orientation runs faster in sgemm for the wide stage-2 maps
    dwt = cols[0] @ g2[0].T
    for i in range(1, n):
        dwt += cols[i] @ g2[i].T
    dw = dwt.T
    db = g.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dcols = np.matmul(w.reshape(co, -1).T, g2)
        if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
            dx = dcols.reshape(x_shape)
        else:
            dx = kernels.col2im(dcols, x_shape, kh, kw, sh, sw, ph, pw)
    return dx, dw.reshape(w.shape), db


def deconv2d_forward(x, w, b=None, stride=1, pad=0, output_padding=0):
    """Transposed convolution.  Returns ``y``; the backward pass needs only ``x``."""
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    oph, opw = _pair(output_padding)
    if oph >= sh or opw >= sw:
        raise ValueError(f"deconv2d: output_padding {(oph, opw)} must be smaller than stride {(sh, sw)}")
    n, c, h, wd = x.shape
    ci, co, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"deconv2d: input has {c} channels, weights expect {ci}")
    ho = deconv_out_size(h, kh, sh, ph, oph)
    wo = deconv_out_size(wd, kw, sw, pw, opw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"deconv2d: non-positive output size {(ho, wo)}")
    cols = np.matmul(w.reshape(ci, -1).T, np.ascontiguousarray(x).reshape(n, ci, h * wd))
    y = kernels.col2im(cols, (n, co, ho, wo), kh, kw, sh, sw, ph, pw)
    if b is not None:
        y += b.reshape(1, co, 1, 1)
    return y


def deconv2d_backward(g, x, w, stride=1, pad=0, need_dx=True):
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    n, ci, h, wd = x.shape
    gcols = kernels.im2col(g, w.shape[2], w.shape[3], sh, sw, ph, pw)
    x2 = np.ascontiguousarray(x).reshape(n, ci, h * wd)
    dw = x2[0] @ gcols[0].T
    for i in range(1, n):
        dw += x2[i] @ gcols[i].T
    db = g.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dx = np.matmul(w.reshape(ci, -1), gcols).reshape(x.shape)
    return dx, dw.reshape(w.shape), db


def deconv_coverage(in_hw, k: int, stride: int, pad: int, output_padding: int = 0) -> np.ndarray:
    """Number of kernel taps landing on each output pixel of a transposed convolution."""
    h, w = in_hw
    ones = np.ones((1, 1, h, w))
    return deconv2d_forward(ones, np.ones((1, 1, k, k)), None, stride, pad, output_padding)[0, 0]


# -- pooling -------------------------------------------------------------------

def maxpool2_forward(x):
    """2x2 max-pool, stride 2, floor semantics.  Returns ``(y, argmax_index)``."""
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2: input {x.shape} gives an empty output")
    return kernels.maxpool2_forward(x)


def maxpool2_backward(g, idx, x_shape):
    return kernels.maxpool2_backward(g, idx, x_shape)


# -- batch normalization ----------------------------------------------------------

def batchnorm_train_forward(x, gamma, beta, eps):
    """Returns ``(y, batch_mean, batch_var, cache)`` with the biased batch variance."""
    y, xhat, mean, var, inv_std = kernels.bn_train_forward(x, gamma, beta, eps)
    return y, mean, var, (xhat, inv_std)


def batchnorm_train_backward(g, gamma, cache):
    xhat, inv_std = cache
    return kernels.bn_train_backward(g, xhat, gamma, inv_std)


def batchnorm_eval_forward(x, gamma, beta, running_mean, running_var, eps):
    inv_std = 1.0 / np.sqrt(running_var.reshape(1, -1, 1, 1) + eps)
    scale = gamma.reshape(1, -1, 1, 1) * inv_std
    shift = beta.reshape(1, -1, 1, 1) - running_mean.reshape(1, -1, 1, 1) * scale
    return x * scale.astype(x.dtype) + shift.astype(x.dtype)


def batchnorm_eval_backward(g, x, gamma, running_mean, running_var, eps):
    inv_std = 1.0 / np.sqrt(running_var.reshape(1, -1, 1, 1) + eps)
    xhat = (x - running_mean.reshape(1, -1, 1, 1)) * inv_std
    dx = g * (gamma.reshape(1, -1, 1, 1) * inv_std)
    return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))


# -- activations -------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(g, x):
    # subgradient 0 at x == 0
    return g * (x > 0)


def sigmoid(x):
    """Stable logistic: never evaluates ``exp`` of a positive argument."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_backward(g, y):
    return g * y * (1 - y)


# -- structural ops ------------------------------------------------------------------

def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat: shapes {a.shape} and {b.shape} differ outside the channel axis")
    return np.concatenate([a, b], axis=1)


def concat_backward(g, ca: int):
    return g[:, :ca], g[:, ca:]


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


# -- bilinear up-sampling -------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (n_out x n_in), half-pixel centres (align_corners=False)."""
    if n_out < n_in:
        raise ValueError(f"bilinear: target size {n_out} smaller than input {n_in}")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def _target(x_shape, factor=None, size=None):
    h, w = x_shape[2], x_shape[3]
    if size is not None:
        return int(size[0]), int(size[1])
    if factor is None or factor < 1:
        raise ValueError(f"bilinear: invalid factor {factor}")
    return h * int(factor), w * int(factor)


def bilinear_forward(x, factor=None, size=None):
    ho, wo = _target(x.shape, factor, size)
    mh = bilinear_matrix(x.shape[2], ho, x.dtype)
    mw = bilinear_matrix(x.shape[3], wo, x.dtype)
    return np.matmul(np.matmul(mh, x), mw.T)


def bilinear_backward(g, x_shape):
    mh = bilinear_matrix(x_shape[2], g.shape[2], g.dtype)
    mw = bilinear_matrix(x_shape[3], g.shape[3], g.dtype)
    return np.matmul(np.matmul(mh.T, g), mw)
