"""Pure-numpy reference kernels.

Used when the compiled extension is unavailable or disabled with
``OSACOST_PURE_PYTHON=1``. Every function here has a twin with the same
signature in ``_kernels.pyx``.
"""

import numpy as np


def softmax_forward(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layernorm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0].astype(x.dtype)


def layernorm_backward(g, xhat, rstd, gamma):
    n = xhat.shape[1]
    gxhat = g * gamma
    a = gxhat.sum(axis=1, keepdims=True) / n
    b = (gxhat * xhat).sum(axis=1, keepdims=True) / n
    gx = rstd[:, None] * (gxhat - a - xhat * b)
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm_forward(xw, wh, mask, h0, c0):
    """Masked LSTM recurrence over a whole sequence.

    ``xw`` holds the input projections plus bias, gate order (i, f, g, o).
    Where ``mask`` is 0 the state is carried through unchanged.
    """
    B, L, G = xw.shape
    H = G // 4
    hs = np.empty((B, L, H), dtype=xw.dtype)
    cs = np.empty((B, L, H), dtype=xw.dtype)
    acts = np.empty_like(xw)
    tanh_c = np.empty((B, L, H), dtype=xw.dtype)
    h, c = h0, c0
    for t in range(L):
        z = xw[:, t] + h @ wh
        a = acts[:, t]
        a[:, :2 * H] = _sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        c_new = a[:, H:2 * H] * c + a[:, :H] * a[:, 2 * H:3 * H]
        tc = np.tanh(c_new)
        tanh_c[:, t] = tc
        h_new = a[:, 3 * H:] * tc
        m = mask[:, t, None]
        c = m * c_new + (1 - m) * c
        h = m * h_new + (1 - m) * h
        hs[:, t] = h
        cs[:, t] = c
    # padded steps carry no gradient; zero them to match the compiled kernel
    live = (mask != 0)[..., None]
    return hs, cs, acts * live, tanh_c * live


def lstm_backward(ghs, acts, tanh_c, hs, cs, mask, wh, h0, c0):
    B, L, H = ghs.shape
    gxw = np.empty_like(acts)
    gwh = np.zeros_like(wh)
    dh = np.zeros((B, H), dtype=ghs.dtype)
    dc = np.zeros((B, H), dtype=ghs.dtype)
    for t in range(L - 1, -1, -1):
        h_prev = hs[:, t - 1] if t > 0 else h0
        c_prev = cs[:, t - 1] if t > 0 else c0
        m = mask[:, t, None]
        dh_tot = ghs[:, t] + dh
        dh_new = m * dh_tot
        dc_new = m * dc
        a = acts[:, t]
        i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        tc = tanh_c[:, t]
        do = dh_new * tc
        dc_new = dc_new + dh_new * o * (1 - tc * tc)
        dz = gxw[:, t]
        dz[:, :H] = dc_new * g * i * (1 - i)
        dz[:, H:2 * H] = dc_new * c_prev * f * (1 - f)
        dz[:, 2 * H:3 * H] = dc_new * i * (1 - g * g)
        dz[:, 3 * H:] = do * o * (1 - o)
        gwh += h_prev.T @ dz
        dh = dz @ wh.T + (1 - m) * dh_tot
        dc = dc_new * f + (1 - m) * dc
    return gxw, gwh, dh, dc
