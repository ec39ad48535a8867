"""Backend selection for the hot loops.

The compiled extension ``carnet._ckernels`` is used when it imports; otherwise
the numpy versions in ``carnet._npkernels`` are used.  Setting the environment
variable ``CARNET_BACKEND=python`` forces the fallback.
"""
import logging
import os

import numpy as np

from . import _npkernels

log = logging.getLogger(__name__)

_requested = os.environ.get("CARNET_BACKEND", "auto").lower()
_compiled = None
if _requested != "python":
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        if _requested == "cython":
            raise
        log.debug("carnet._ckernels unavailable, using numpy kernels")

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _npkernels


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, kh, kw, sh=1, sw=1, ph=0, pw=0):
    return _impl.im2col(_c(x), kh, kw, sh, sw, ph, pw)


def col2im(cols, shape, kh, kw, sh=1, sw=1, ph=0, pw=0):
    return _impl.col2im(_c(cols), tuple(shape), kh, kw, sh, sw, ph, pw)


def maxpool2_forward(x):
    return _impl.maxpool2_forward(_c(x))


def maxpool2_backward(g, idx, shape):
    return _impl.maxpool2_backward(_c(g), _c(idx), tuple(shape))


def bn_train_forward(x, gamma, beta, eps):
    """Returns ``(y, xhat, mean, var, inv_std)``; statistics are float64 vectors (biased var)."""
    return _impl.bn_train_forward(_c(x), _c(np.asarray(gamma, dtype=np.float64)),
                                  _c(np.asarray(beta, dtype=np.float64)), float(eps))


def bn_train_backward(g, xhat, gamma, inv_std):
    """Returns ``(dx, dgamma, dbeta)``."""
    return _impl.bn_train_backward(_c(g), _c(xhat), _c(np.asarray(gamma, dtype=np.float64)),
                                   _c(np.asarray(inv_std, dtype=np.float64)))


def relu_backward_(g, y):
    """Zero ``g`` in place where ``y <= 0``; returns ``g``."""
    # numpy's SIMD multiply beats a scalar compiled loop here, so both backends share it
    return _npkernels.relu_backward_(g, _c(y))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """In-place Adam step on flat contiguous float32 buffers."""
    _impl.adam_update(p, g, m, v, float(lr), float(beta1), float(beta2), float(eps), int(t))
