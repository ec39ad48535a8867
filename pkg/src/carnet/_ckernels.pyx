# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: patch extraction/scatter for convolutions and 2x2 max-pooling.

Signatures and results match ``carnet._npkernels`` exactly; both operate on
C-contiguous float32 or float64 NCHW arrays.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, sqrtf

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w + 2 * pw - kw) // sw + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c * kh * kw, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, row, ih, iw, base, ow_lo, ow_hi
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        # valid ow range: 0 <= ow*sw - pw + j < w
                        ow_lo = 0
                        while ow_lo < wo and ow_lo * sw - pw + j < 0:
                            ow_lo = ow_lo + 1
                        ow_hi = wo
                        while ow_hi > ow_lo and (ow_hi - 1) * sw - pw + j >= w:
                            ow_hi = ow_hi - 1
                        for oh in range(ho):
                            ih = oh * sh - ph + i
                            base = oh * wo
                            if ih < 0 or ih >= h:
                                for ow in range(wo):
                                    cols[b, row, base + ow] = 0
                                continue
                            for ow in range(ow_lo):
                                cols[b, row, base + ow] = 0
                            for ow in range(ow_hi, wo):
                                cols[b, row, base + ow] = 0
                            if sw == 1:
                                for ow in range(ow_lo, ow_hi):
                                    cols[b, row, base + ow] = x[b, ch, ih, ow - pw + j]
                            else:
                                for ow in range(ow_lo, ow_hi):
                                    cols[b, row, base + ow] = x[b, ch, ih, ow * sw - pw + j]
    return out


def col2im(floating[:, :, ::1] cols, shape, int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w + 2 * pw - kw) // sw + 1
    if cols.shape[0] != n or cols.shape[1] != c * kh * kw or cols.shape[2] != ho * wo:
        raise ValueError(f"cols shape {tuple(cols.shape)[:3]} inconsistent with image shape {tuple(shape)}")
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] x = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, row, ih, base, ow_lo, ow_hi
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        ow_lo = 0
                        while ow_lo < wo and ow_lo * sw - pw + j < 0:
                            ow_lo = ow_lo + 1
                        ow_hi = wo
                        while ow_hi > ow_lo and (ow_hi - 1) * sw - pw + j >= w:
                            ow_hi = ow_hi - 1
                        for oh in range(ho):
                            ih = oh * sh - ph + i
                            if ih < 0 or ih >= h:
                                continue
                            base = oh * wo
                            for ow in range(ow_lo, ow_hi):
                                x[b, ch, ih, ow * sw - pw + j] += cols[b, row, base + ow]
    return out


def maxpool2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.uint8)
    cdef floating[:, :, :, ::1] y = out
    cdef cnp.uint8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oh, ow
    cdef floating best, v
    cdef cnp.uint8_t k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        # row-major window order; strict '>' keeps the first maximum
                        best = x[b, ch, 2 * oh, 2 * ow]
                        k = 0
                        v = x[b, ch, 2 * oh, 2 * ow + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, ch, 2 * oh + 1, 2 * ow]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, ch, 2 * oh + 1, 2 * ow + 1]
                        if v > best:
                            best = v
                            k = 3
                        y[b, ch, oh, ow] = best
                        idx[b, ch, oh, ow] = k
    return out, idx_arr


def maxpool2_backward(floating[:, :, :, ::1] g, cnp.uint8_t[:, :, :, ::1] idx, shape):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, oh, ow
    cdef cnp.uint8_t k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        k = idx[b, ch, oh, ow]
                        dx[b, ch, 2 * oh + (k >> 1), 2 * ow + (k & 1)] = g[b, ch, oh, ow]
    return out


def bn_train_forward(floating[:, :, :, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    """Batch statistics (float64 accumulation) and normalisation in two passes."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3]
    cdef Py_ssize_t b, ch, k
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, c, x.shape[2], x.shape[3]), dtype=dtype)
    xhat_arr = np.empty_like(y_arr)
    mean_arr = np.zeros(c)
    var_arr = np.zeros(c)
    inv_arr = np.zeros(c)
    cdef floating[:, :, ::1] xv = np.asarray(x).reshape(n, c, hw)
    cdef floating[:, :, ::1] yv = y_arr.reshape(n, c, hw)
    cdef floating[:, :, ::1] hv = xhat_arr.reshape(n, c, hw)
    cdef double[::1] mean = mean_arr, var = var_arr, inv = inv_arr
    cdef double s, d, m = n * hw, mu, istd, gm, bt
    with nogil:
        for ch in range(c):
            s = 0.0
            for b in range(n):
                for k in range(hw):
                    s += xv[b, ch, k]
            mu = s / m
            s = 0.0
            for b in range(n):
                for k in range(hw):
                    d = xv[b, ch, k] - mu
                    s += d * d
            mean[ch] = mu
            var[ch] = s / m
            istd = 1.0 / sqrt(var[ch] + eps)
            inv[ch] = istd
            gm = gamma[ch]
            bt = beta[ch]
            for b in range(n):
                for k in range(hw):
                    d = (xv[b, ch, k] - mu) * istd
                    hv[b, ch, k] = <floating>d
                    yv[b, ch, k] = <floating>(d * gm + bt)
    return y_arr, xhat_arr, mean_arr, var_arr, inv_arr


def bn_train_backward(floating[:, :, :, ::1] g, floating[:, :, :, ::1] xhat, double[::1] gamma, double[::1] inv_std):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], hw = g.shape[2] * g.shape[3]
    cdef Py_ssize_t b, ch, k
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((n, c, g.shape[2], g.shape[3]), dtype=dtype)
    dgamma_arr = np.zeros(c)
    dbeta_arr = np.zeros(c)
    cdef floating[:, :, ::1] gv = np.asarray(g).reshape(n, c, hw)
    cdef floating[:, :, ::1] hv = np.asarray(xhat).reshape(n, c, hw)
    cdef floating[:, :, ::1] dv = dx_arr.reshape(n, c, hw)
    cdef double[::1] dgamma = dgamma_arr, dbeta = dbeta_arr
    cdef double sg, sgh, m = n * hw, scale, a, bb
    with nogil:
        for ch in range(c):
            sg = 0.0
            sgh = 0.0
            for b in range(n):
                for k in range(hw):
                    sg += gv[b, ch, k]
                    sgh += gv[b, ch, k] * hv[b, ch, k]
            dbeta[ch] = sg
            dgamma[ch] = sgh
            scale = gamma[ch] * inv_std[ch]
            a = sg / m
            bb = sgh / m
            for b in range(n):
                for k in range(hw):
                    dv[b, ch, k] = <floating>(scale * (gv[b, ch, k] - a - hv[b, ch, k] * bb))
    return dx_arr, dgamma_arr, dbeta_arr


def adam_update(float[::1] p, float[::1] g, float[::1] m, float[::1] v,
                double lr, double beta1, double beta2, double eps, long t):
    """One bias-corrected Adam step over flat float32 buffers, in place (float32 arithmetic)."""
    cdef Py_ssize_t k, total = p.shape[0]
    cdef float b1 = <float>beta1, b2 = <float>beta2
    cdef float omb1 = <float>(1.0 - beta1), omb2 = <float>(1.0 - beta2)
    cdef float step = <float>(lr / (1.0 - beta1 ** t))
    cdef float isc2 = <float>(1.0 / sqrt(1.0 - beta2 ** t))
    cdef float e = <float>eps
    cdef float* pp = &p[0] if total else NULL
    cdef float* gp = &g[0] if total else NULL
    cdef float* mp = &m[0] if total else NULL
    cdef float* vp = &v[0] if total else NULL
    cdef float gk, mk, vk
    with nogil:
        for k in range(total):
            gk = gp[k]
            mk = b1 * mp[k] + omb1 * gk
            vk = b2 * vp[k] + omb2 * (gk * gk)
            mp[k] = mk
            vp[k] = vk
            pp[k] = pp[k] - step * mk / (sqrtf(vk) * isc2 + e)
