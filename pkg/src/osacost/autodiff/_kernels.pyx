# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise and recurrent kernels.

Mirror of ``_kernels_py``; both modules must return identical shapes and
agree to floating-point rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, sqrt
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _gemm(char ta, char tb, int m, int n, int k, real alpha,
                       real *a, int lda, real *b, int ldb, real beta,
                       real *c, int ldc) noexcept nogil:
    # column-major BLAS call
    if real is float:
        sgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef extern from *:
    """
    /* odd rational fit to tanh, ~3 ulp in float; branch-free so the row loops vectorise */
    static inline float osacost_tanhf(float x) {
        const float lim = 7.90531110763549805f;
        x = x > lim ? lim : x;
        x = x < -lim ? -lim : x;
        float x2 = x * x;
        float p = x2 * -2.76076847742355e-16f + 2.00018790482477e-13f;
        p = x2 * p + -8.60467152213735e-11f;
        p = x2 * p + 5.12229709037114e-08f;
        p = x2 * p + 1.48572235717979e-05f;
        p = x2 * p + 6.37261928875436e-04f;
        p = x2 * p + 4.89352455891786e-03f;
        float q = x2 * 1.19825839466702e-06f + 1.18534705686654e-04f;
        q = x2 * q + 2.26843463243900e-03f;
        q = x2 * q + 4.89352518554385e-03f;
        return x * p / q;
    }

    /* expf by range reduction and a degree-5 polynomial, ~1.5 ulp; branch-free */
    static inline float osacost_expf(float x) {
        union { int i; float f; } scale;
        x = x < -87.0f ? -87.0f : x;
        x = x > 88.0f ? 88.0f : x;
        float fn = (x * 1.44269504088896341f + 12582912.0f) - 12582912.0f;
        float r = x - fn * 0.693359375f - fn * -2.12194440e-4f;
        float p = r * 1.9875691500e-4f + 1.3981999507e-3f;
        p = p * r + 8.3334519073e-3f;
        p = p * r + 4.1665795894e-2f;
        p = p * r + 1.6666665459e-1f;
        p = p * r + 5.0000001201e-1f;
        scale.i = ((int)fn + 127) << 23;
        return (p * r * r + r + 1.0f) * scale.f;
    }

    static void osacost_softmax_row_f(int m, const float *restrict x, float *restrict y) {
        int j;
        float mx = x[0], s = 0.0f;
        for (j = 1; j < m; j++) mx = x[j] > mx ? x[j] : mx;
        for (j = 0; j < m; j++) y[j] = osacost_expf(x[j] - mx);
        for (j = 0; j < m; j++) s += y[j];
        for (j = 0; j < m; j++) y[j] = y[j] / s;
    }

    /* one LSTM row: gates (i, f, g, o) from z, then the cell and hidden update */
    static void osacost_lstm_row_f(int H, const float *restrict z, float *restrict a,
                                   float *restrict c, float *restrict h, float *restrict tc) {
        int j;
        for (j = 0; j < 2 * H; j++) a[j] = 0.5f + 0.5f * osacost_tanhf(0.5f * z[j]);
        for (j = 2 * H; j < 3 * H; j++) a[j] = osacost_tanhf(z[j]);
        for (j = 3 * H; j < 4 * H; j++) a[j] = 0.5f + 0.5f * osacost_tanhf(0.5f * z[j]);
        for (j = 0; j < H; j++) c[j] = a[H + j] * c[j] + a[j] * a[2 * H + j];
        for (j = 0; j < H; j++) tc[j] = osacost_tanhf(c[j]);
        for (j = 0; j < H; j++) h[j] = a[3 * H + j] * tc[j];
    }

    /* one LSTM row of the backward recurrence; dh holds the incoming carried
       gradient and leaves holding the part carried past padded steps */
    #define OSACOST_LSTM_ROW_BWD(T)                                                        \
    static void osacost_lstm_row_bwd_##T(int H, T m, const T *restrict gh,                \
                                         const T *restrict a, const T *restrict tc,        \
                                         const T *restrict cprev, T *restrict dh,          \
                                         T *restrict dc, T *restrict dz) {                 \
        int j;                                                                             \
        for (j = 0; j < H; j++) {                                                          \
            T dht = gh[j] + dh[j];                                                         \
            T dhnew = m * dht;                                                             \
            T ig = a[j], fg = a[H + j], gg = a[2 * H + j], og = a[3 * H + j];              \
            T dcnew = m * dc[j] + dhnew * og * (1 - tc[j] * tc[j]);                        \
            dz[j] = dcnew * gg * ig * (1 - ig);                                            \
            dz[H + j] = dcnew * cprev[j] * fg * (1 - fg);                                  \
            dz[2 * H + j] = dcnew * ig * (1 - gg * gg);                                    \
            dz[3 * H + j] = dhnew * tc[j] * og * (1 - og);                                 \
            dh[j] = (1 - m) * dht;                                                         \
            dc[j] = dcnew * fg + (1 - m) * dc[j];                                          \
        }                                                                                  \
    }
    OSACOST_LSTM_ROW_BWD(float)
    OSACOST_LSTM_ROW_BWD(double)
    """
    float _tanh_rational "osacost_tanhf"(float x) noexcept nogil
    void _softmax_row_f "osacost_softmax_row_f"(int m, const float *x, float *y) noexcept nogil
    void _lstm_row_f "osacost_lstm_row_f"(int H, const float *z, float *a, float *c, float *h,
                                          float *tc) noexcept nogil
    void _lstm_row_bwd_f "osacost_lstm_row_bwd_float"(int H, float m, const float *gh, const float *a,
                                                      const float *tc, const float *cprev, float *dh,
                                                      float *dc, float *dz) noexcept nogil
    void _lstm_row_bwd_d "osacost_lstm_row_bwd_double"(int H, double m, const double *gh, const double *a,
                                                       const double *tc, const double *cprev, double *dh,
                                                       double *dc, double *dz) noexcept nogil


cdef inline double _sig(double z) noexcept nogil:
    return 1 / (1 + exp(-z))


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] y = out
    cdef real mx, s
    with nogil:
        for i in range(n):
            if real is float:
                _softmax_row_f(<int>m, &x[i, 0], &y[i, 0])
            else:
                mx = x[i, 0]
                for j in range(1, m):
                    if x[i, j] > mx:
                        mx = x[i, j]
                s = 0
                for j in range(m):
                    y[i, j] = exp(x[i, j] - mx)
                    s = s + y[i, j]
                for j in range(m):
                    y[i, j] = y[i, j] / s
    return out


def softmax_backward(real[:, ::1] y, real[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] gx = out
    cdef real dot
    with nogil:
        for i in range(n):
            dot = 0
            for j in range(m):
                dot = dot + g[i, j] * y[i, j]
            for j in range(m):
                gx[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def layernorm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dt = np.asarray(x).dtype
    out = np.empty((n, m), dtype=dt)
    xh = np.empty((n, m), dtype=dt)
    rs = np.empty(n, dtype=dt)
    cdef real[:, ::1] y = out
    cdef real[:, ::1] xhat = xh
    cdef real[::1] rstd = rs
    cdef double mu, var, d, r
    with nogil:
        for i in range(n):
            mu = 0
            for j in range(m):
                mu = mu + x[i, j]
            mu = mu / m
            var = 0
            for j in range(m):
                d = x[i, j] - mu
                var = var + d * d
            r = 1.0 / sqrt(var / m + eps)
            rstd[i] = r
            for j in range(m):
                xhat[i, j] = (x[i, j] - mu) * r
                y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return out, xh, rs


def layernorm_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1], i, j
    dt = np.asarray(g).dtype
    out = np.empty((n, m), dtype=dt)
    gg = np.zeros(m, dtype=dt)
    gb = np.zeros(m, dtype=dt)
    cdef real[:, ::1] gx = out
    cdef real[::1] ggamma = gg
    cdef real[::1] gbeta = gb
    cdef double a, b, gh
    with nogil:
        for i in range(n):
            a = 0
            b = 0
            for j in range(m):
                gh = g[i, j] * gamma[j]
                a = a + gh
                b = b + gh * xhat[i, j]
                ggamma[j] = ggamma[j] + g[i, j] * xhat[i, j]
                gbeta[j] = gbeta[j] + g[i, j]
            a = a / m
            b = b / m
            for j in range(m):
                gx[i, j] = rstd[i] * (g[i, j] * gamma[j] - a - xhat[i, j] * b)
    return out, gg, gb


def lstm_forward(real[:, :, ::1] xw, real[:, ::1] wh, real[:, ::1] mask,
                 real[:, ::1] h0, real[:, ::1] c0):
    cdef Py_ssize_t B = xw.shape[0], L = xw.shape[1], G = xw.shape[2]
    cdef Py_ssize_t H = G // 4, b, t, j
    dt = np.asarray(xw).dtype
    hs_a = np.empty((B, L, H), dtype=dt)
    cs_a = np.empty((B, L, H), dtype=dt)
    acts_a = np.empty((B, L, G), dtype=dt)
    tc_a = np.empty((B, L, H), dtype=dt)
    z_a = np.empty((B, G), dtype=dt)
    hp_a = np.array(h0, dtype=dt, copy=True)
    cp_a = np.array(c0, dtype=dt, copy=True)
    cdef real[:, :, ::1] hs = hs_a
    cdef real[:, :, ::1] cs = cs_a
    cdef real[:, :, ::1] acts = acts_a
    cdef real[:, :, ::1] tcs = tc_a
    cdef real[:, ::1] z = z_a
    cdef real[:, ::1] hp = hp_a
    cdef real[:, ::1] cp = cp_a
    cdef real *a
    cdef real *zr
    cdef real *tc
    cdef real *hrow
    cdef real *crow
    cdef real cn, m
    with nogil:
        for t in range(L):
            for b in range(B):
                for j in range(G):
                    z[b, j] = xw[b, t, j]
            # z += h_prev @ wh
            _gemm(c'N', c'N', <int>G, <int>B, <int>H, <real>1.0,
                  &wh[0, 0], <int>G, &hp[0, 0], <int>H, <real>1.0, &z[0, 0], <int>G)
            for b in range(B):
                m = mask[b, t]
                a = &acts[b, t, 0]
                tc = &tcs[b, t, 0]
                hrow = &hp[b, 0]
                crow = &cp[b, 0]
                if m == 0:
                    # padded step: carry the state, zero activations keep backward exact
                    for j in range(G):
                        a[j] = 0
                    for j in range(H):
                        tc[j] = 0
                        hs[b, t, j] = hrow[j]
                        cs[b, t, j] = crow[j]
                    continue
                zr = &z[b, 0]
                if real is float:
                    _lstm_row_f(<int>H, zr, a, crow, hrow, tc)
                else:
                    # gate order (i, f, g, o)
                    for j in range(2 * H):
                        a[j] = _sig(zr[j])
                    for j in range(2 * H, 3 * H):
                        a[j] = tanh(zr[j])
                    for j in range(3 * H, G):
                        a[j] = _sig(zr[j])
                    for j in range(H):
                        crow[j] = a[H + j] * crow[j] + a[j] * a[2 * H + j]
                        tc[j] = tanh(crow[j])
                        hrow[j] = a[3 * H + j] * tc[j]
                for j in range(H):
                    hs[b, t, j] = hrow[j]
                    cs[b, t, j] = crow[j]
    return hs_a, cs_a, acts_a, tc_a


def lstm_backward(real[:, :, ::1] ghs, real[:, :, ::1] acts, real[:, :, ::1] tanh_c,
                  real[:, :, ::1] hs, real[:, :, ::1] cs, real[:, ::1] mask,
                  real[:, ::1] wh, real[:, ::1] h0, real[:, ::1] c0):
    cdef Py_ssize_t B = ghs.shape[0], L = ghs.shape[1], H = ghs.shape[2]
    cdef Py_ssize_t G = 4 * H, b, t
    dt = np.asarray(ghs).dtype
    gxw_a = np.empty((B, L, G), dtype=dt)
    gwh_a = np.zeros((H, G), dtype=dt)
    dh_a = np.zeros((B, H), dtype=dt)
    dc_a = np.zeros((B, H), dtype=dt)
    cdef real[:, :, ::1] gxw = gxw_a
    cdef real[:, ::1] gwh = gwh_a
    cdef real[:, ::1] dh = dh_a
    cdef real[:, ::1] dc = dc_a
    cdef real *hprev
    cdef real *cprev
    cdef int ldp
    with nogil:
        for t in range(L - 1, -1, -1):
            for b in range(B):
                cprev = &cs[b, t - 1, 0] if t > 0 else &c0[b, 0]
                if real is float:
                    _lstm_row_bwd_f(<int>H, mask[b, t], &ghs[b, t, 0], &acts[b, t, 0], &tanh_c[b, t, 0],
                                    cprev, &dh[b, 0], &dc[b, 0], &gxw[b, t, 0])
                else:
                    _lstm_row_bwd_d(<int>H, mask[b, t], &ghs[b, t, 0], &acts[b, t, 0], &tanh_c[b, t, 0],
                                    cprev, &dh[b, 0], &dc[b, 0], &gxw[b, t, 0])
            # rows of dz are gxw[:, t], rows of h_prev are hs[:, t - 1] (or h0)
            if t > 0:
                hprev = &hs[0, t - 1, 0]
                ldp = <int>(L * H)
            else:
                hprev = &h0[0, 0]
                ldp = <int>H
            # gwh += h_prev^T @ dz
            _gemm(c'N', c'T', <int>G, <int>H, <int>B, <real>1.0,
                  &gxw[0, t, 0], <int>(L * G), hprev, ldp, <real>1.0, &gwh[0, 0], <int>G)
            # dh = dz @ wh^T + the part carried past padding
            _gemm(c'T', c'N', <int>H, <int>B, <int>G, <real>1.0,
                  &wh[0, 0], <int>G, &gxw[0, t, 0], <int>(L * G), <real>1.0, &dh[0, 0], <int>H)
    return gxw_a, gwh_a, dh_a, dc_a
