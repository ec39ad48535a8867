"""Pure-numpy versions of the hot loops (the fallback backend).

Functions mirror ``carnet._ckernels`` one-for-one.  Patch extraction works a
kernel tap at a time: each tap is a single strided slice copy, so the Python
overhead is ``kh * kw`` slice operations per call.
"""
import numpy as np


def _out_size(h, w, kh, kw, sh, sw, ph, pw):
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def im2col(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, w, kh, kw, sh, sw, ph, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw, sh, sw, ph, pw):
    n, c, h, w = shape
    ho, wo = _out_size(h, w, kh, kw, sh, sw, ph, pw)
    if cols.shape != (n, c * kh * kw, ho * wo):
        raise ValueError(f"cols shape {cols.shape} inconsistent with image shape {tuple(shape)}")
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    # room for taps that land in the padding or past the floor-truncated edge
    hp = max(h + 2 * ph, sh * (ho - 1) + kh)
    wp = max(w + 2 * pw, sw * (wo - 1) + kw)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, ph:ph + h, pw:pw + w])


def maxpool2_forward(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = np.argmax(win, axis=-1).astype(np.uint8)  # argmax keeps the first maximum
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(g, idx, shape):
    n, c, h, w = shape
    ho, wo = g.shape[2], g.shape[3]
    win = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    dx[:, :, :2 * ho, :2 * wo] = win
    return dx


def bn_train_forward(x, gamma, beta, eps):
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.sum(axis=(0, 2, 3), dtype=np.float64) / m
    xc = x - mean.reshape(1, -1, 1, 1).astype(x.dtype)
    var = np.einsum("nchw,nchw->c", xc, xc, dtype=np.float64) / m
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.reshape(1, -1, 1, 1).astype(x.dtype)
    y = xhat * gamma.reshape(1, -1, 1, 1).astype(x.dtype) + beta.reshape(1, -1, 1, 1).astype(x.dtype)
    return y, xhat, mean, var, inv_std


def bn_train_backward(g, xhat, gamma, inv_std):
    m = g.shape[0] * g.shape[2] * g.shape[3]
    dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64)
    dgamma = np.einsum("nchw,nchw->c", g, xhat, dtype=np.float64)
    scale = (gamma * inv_std).reshape(1, -1, 1, 1).astype(g.dtype)
    a = (dbeta / m).reshape(1, -1, 1, 1).astype(g.dtype)
    b = (dgamma / m).reshape(1, -1, 1, 1).astype(g.dtype)
    return scale * (g - a - xhat * b), dgamma, dbeta


def relu_backward_(g, y):
    np.multiply(g, y > 0, out=g)
    return g


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    # float32 arithmetic, same operation order as the compiled kernel
    f = np.float32
    step = f(lr / (1.0 - beta1 ** t))
    isc2 = f(1.0 / np.sqrt(1.0 - beta2 ** t))
    m *= f(beta1)
    m += f(1.0 - beta1) * g
    v *= f(beta2)
    v += f(1.0 - beta2) * (g * g)
    denom = np.sqrt(v)
    denom *= isc2
    denom += f(eps)
    p -= step * m / denom
