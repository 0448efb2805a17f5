# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``.

Signatures and return conventions match the numpy module exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, fmax, fmaxf, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


cdef inline void _valid_range(int j, int stride, int pad, int W, int Wo,
                              Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns ox with 0 <= ox*stride + j - pad < W
    cdef Py_ssize_t first = 0, last
    if pad > j:
        first = (pad - j + stride - 1) // stride
    last = (W - 1 + pad - j) // stride + 1 if W - 1 + pad - j >= 0 else 0
    lo[0] = min(first, Wo)
    hi[0] = max(lo[0], min(last, Wo))


cdef void _im2col(real[:, :, :, ::1] x, real[:, :, ::1] cols,
                  int k, int stride, int pad, int Ho, int Wo) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, i, j, oy, ox, row, iy, lo, hi, base
    cdef real* dst
    cdef real* src
    for b in range(B):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    row = (c * k + i) * k + j
                    _valid_range(j, stride, pad, W, Wo, &lo, &hi)
                    for oy in range(Ho):
                        dst = &cols[b, row, oy * Wo]
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= H:
                            for ox in range(Wo):
                                dst[ox] = 0
                            continue
                        src = &x[b, c, iy, 0]
                        base = j - pad
                        for ox in range(lo):
                            dst[ox] = 0
                        if stride == 1:
                            for ox in range(lo, hi):
                                dst[ox] = src[ox + base]
                        else:
                            for ox in range(lo, hi):
                                dst[ox] = src[ox * stride + base]
                        for ox in range(hi, Wo):
                            dst[ox] = 0


cdef void _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] x,
                  int k, int stride, int pad, int Ho, int Wo) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, i, j, oy, ox, row, iy, lo, hi, base
    cdef real* dst
    cdef real* src
    for b in range(B):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    row = (c * k + i) * k + j
                    _valid_range(j, stride, pad, W, Wo, &lo, &hi)
                    for oy in range(Ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= H:
                            continue
                        src = &cols[b, row, oy * Wo]
                        dst = &x[b, c, iy, 0]
                        base = j - pad
                        if stride == 1:
                            for ox in range(lo, hi):
                                dst[ox + base] += src[ox]
                        else:
                            for ox in range(lo, hi):
                                dst[ox * stride + base] += src[ox]


def im2col(x, int k, int stride, int pad):
    x = np.ascontiguousarray(x)
    cdef int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int Ho = (H + 2 * pad - k) // stride + 1
    cdef int Wo = (W + 2 * pad - k) // stride + 1
    cols = np.empty((B, C * k * k, Ho * Wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, k, stride, pad, Ho, Wo)
    else:
        _im2col[double](x, cols, k, stride, pad, Ho, Wo)
    return cols


def col2im(cols, shape, int k, int stride, int pad):
    B, C, H, W = shape
    cdef int Ho = (H + 2 * pad - k) // stride + 1
    cdef int Wo = (W + 2 * pad - k) // stride + 1
    cols = np.ascontiguousarray(cols).reshape(B, C * k * k, Ho * Wo)
    x = np.zeros((B, C, H, W), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, x, k, stride, pad, Ho, Wo)
    else:
        _col2im[double](cols, x, k, stride, pad, Ho, Wo)
    return x


cdef void _ln_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps,
                  real[:, ::1] y, real[:, ::1] xhat, real[::1] rstd) noexcept nogil:
    cdef Py_ssize_t M = x.shape[0], D = x.shape[1], r, d
    cdef double mean, var, t, rs
    for r in range(M):
        mean = 0
        for d in range(D):
            mean += x[r, d]
        mean /= D
        var = 0
        for d in range(D):
            t = x[r, d] - mean
            var += t * t
        var /= D
        rs = 1.0 / sqrt(var + eps)
        rstd[r] = <real>rs
        for d in range(D):
            t = (x[r, d] - mean) * rs
            xhat[r, d] = <real>t
            y[r, d] = <real>(t * gamma[d] + beta[d])


cdef void _ln_bwd(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma,
                  real[:, ::1] dx, double[::1] dgamma, double[::1] dbeta) noexcept nogil:
    cdef Py_ssize_t M = dy.shape[0], D = dy.shape[1], r, d
    cdef double a, b, g
    for r in range(M):
        a = 0
        b = 0
        for d in range(D):
            g = dy[r, d] * gamma[d]
            a += g
            b += g * xhat[r, d]
            dgamma[d] += dy[r, d] * xhat[r, d]
            dbeta[d] += dy[r, d]
        for d in range(D):
            dx[r, d] = <real>((dy[r, d] * gamma[d] - (a + xhat[r, d] * b) / D) * rstd[r])


def layernorm_forward(x, gamma, beta, double eps):
    x = np.ascontiguousarray(x)
    gamma = np.ascontiguousarray(gamma, dtype=x.dtype)
    beta = np.ascontiguousarray(beta, dtype=x.dtype)
    M, D = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(M, dtype=x.dtype)
    if x.dtype == np.float32:
        _ln_fwd[float](x, gamma, beta, eps, y, xhat, rstd)
    else:
        _ln_fwd[double](x, gamma, beta, eps, y, xhat, rstd)
    return y, xhat, rstd


def layernorm_backward(dy, xhat, rstd, gamma):
    dy = np.ascontiguousarray(dy, dtype=xhat.dtype)
    gamma = np.ascontiguousarray(gamma, dtype=xhat.dtype)
    D = xhat.shape[1]
    dx = np.empty_like(xhat)
    dgamma = np.zeros(D, dtype=np.float64)
    dbeta = np.zeros(D, dtype=np.float64)
    if xhat.dtype == np.float32:
        _ln_bwd[float](dy, xhat, rstd, gamma, dx, dgamma, dbeta)
    else:
        _ln_bwd[double](dy, xhat, rstd, gamma, dx, dgamma, dbeta)
    return dx, dgamma.astype(xhat.dtype), dbeta.astype(xhat.dtype)


cdef void _adam(real[::1] p, real[::1] g, real[::1] m, real[::1] v, double lr,
                double b1, double b2, double eps, double wd,
                double bc1, double bc2) noexcept nogil:
    cdef Py_ssize_t n = p.shape[0], i
    cdef double mi, vi, u
    for i in range(n):
        mi = b1 * m[i] + (1.0 - b1) * g[i]
        vi = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        m[i] = <real>mi
        v[i] = <real>vi
        u = (mi / bc1) / (sqrt(vi / bc2) + eps) + wd * p[i]
        p[i] = <real>(p[i] - lr * u)


def adam_update(p, g, m, v, double lr, double beta1, double beta2, double eps,
                double weight_decay, double bc1, double bc2):
    g = np.ascontiguousarray(g, dtype=p.dtype)
    if p.dtype == np.float32:
        _adam[float](p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2)
    else:
        _adam[double](p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2)


cdef void _sm_fwd(real[:, ::1] x, real[:, ::1] y, real c) noexcept nogil:
    cdef Py_ssize_t M = x.shape[0], D = x.shape[1], r, d
    cdef real mx, s, a
    cdef real* xr
    cdef real* yr
    for r in range(M):
        xr = &x[r, 0]
        yr = &y[r, 0]
        mx = xr[0]
        for d in range(1, D):
            if xr[d] > mx:
                mx = xr[d]
        # terms this far below the row max are under one ulp of the sum; they
        # are zeroed so no denormals reach the normalization. The explicit
        # fmax keeps the vector exp off its slow out-of-range path.
        for d in range(D):
            a = c * (xr[d] - mx)
            if real is float:
                yr[d] = expf(fmaxf(a, -60.0)) * <real>(a > -60.0)
            else:
                yr[d] = exp(fmax(a, -600.0)) * <real>(a > -600.0)
        s = 0
        for d in range(D):
            s += yr[d]
        s = 1 / s
        for d in range(D):
            yr[d] *= s


cdef void _sm_bwd(real[:, ::1] g, real[:, ::1] y, real[:, ::1] dx, real c) noexcept nogil:
    cdef Py_ssize_t M = g.shape[0], D = g.shape[1], r, d
    cdef real dot
    cdef real* gr
    cdef real* yr
    cdef real* dr
    for r in range(M):
        gr = &g[r, 0]
        yr = &y[r, 0]
        dr = &dx[r, 0]
        dot = 0
        for d in range(D):
            dot += gr[d] * yr[d]
        for d in range(D):
            dr[d] = c * yr[d] * (gr[d] - dot)


def softmax_forward(x, double scale=1.0):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    if x.dtype == np.float32:
        _sm_fwd[float](x, y, <float>scale)
    else:
        _sm_fwd[double](x, y, scale)
    return y


def softmax_backward(g, y, double scale=1.0):
    g = np.ascontiguousarray(g, dtype=y.dtype)
    y = np.ascontiguousarray(y)
    dx = np.empty_like(y)
    if y.dtype == np.float32:
        _sm_bwd[float](g, y, dx, <float>scale)
    else:
        _sm_bwd[double](g, y, dx, scale)
    return dx
