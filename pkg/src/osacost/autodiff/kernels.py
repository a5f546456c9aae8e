"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; otherwise the numpy
implementation takes over. Set ``OSACOST_PURE_PYTHON=1`` to force the numpy
path (the benchmark does this in a subprocess).
"""

import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("OSACOST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def _c(a):
    return np.ascontiguousarray(a)


def softmax_forward(x):
    if x.size == 0:
        return x.copy()
    return _impl.softmax_forward(_c(x))


def softmax_backward(y, g):
    if y.size == 0:
        return y.copy()
    return _impl.softmax_backward(_c(y), _c(g.astype(y.dtype, copy=False)))


def layernorm_forward(x, gamma, beta, eps):
    return _impl.layernorm_forward(_c(x), _c(gamma), _c(beta), eps)


def layernorm_backward(g, xhat, rstd, gamma):
    return _impl.layernorm_backward(_c(g.astype(xhat.dtype, copy=False)), xhat, rstd, _c(gamma))


def lstm_forward(xw, wh, mask, h0, c0):
    dt = xw.dtype
    return _impl.lstm_forward(_c(xw), _c(wh), _c(mask.astype(dt, copy=False)),
                              _c(h0.astype(dt, copy=False)), _c(c0.astype(dt, copy=False)))


def lstm_backward(ghs, acts, tanh_c, hs, cs, mask, wh, h0, c0):
    dt = acts.dtype
    return _impl.lstm_backward(_c(ghs.astype(dt, copy=False)), acts, tanh_c, hs, cs,
                               _c(mask.astype(dt, copy=False)), _c(wh),
                               _c(h0.astype(dt, copy=False)), _c(c0.astype(dt, copy=False)))
