"""Pure numpy implementations of the hot kernels.

These are the reference versions. The Cython module ``_kernels_c`` exposes the
same functions with the same signatures and is preferred when it is built.
"""

import numpy as np


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    """(B, C, H, W) -> (B, C*k*k, Ho*Wo) patch matrix."""
    B, C, H, W = x.shape
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    if pad:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + H, pad:pad + W] = x
    else:
        xp = x
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        i_end = i + stride * Ho
        for j in range(k):
            j_end = j + stride * Wo
            cols[:, :, i, j] = xp[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(B, C * k * k, Ho * Wo)


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back into an image."""
    B, C, H, W = shape
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        i_end = i + stride * Ho
        for j in range(k):
            j_end = j + stride * Wo
            xp[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])
    return xp


def layernorm_forward(x, gamma, beta, eps):
    """Row-wise layer norm on a 2-D array. Returns (y, xhat, rstd)."""
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma + beta
    return y, xhat, rstd[:, 0]


def layernorm_backward(dy, xhat, rstd, gamma):
    """Returns (dx, dgamma, dbeta)."""
    D = xhat.shape[1]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    a = dxhat.sum(axis=1, keepdims=True)
    b = (dxhat * xhat).sum(axis=1, keepdims=True)
    dx = (dxhat - (a + xhat * b) / D) * rstd[:, None]
    return dx, dgamma, dbeta


def adam_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """In-place AdamW step on flat arrays. bc1/bc2 are 1 - beta**t."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    upd = (m / bc1) / (np.sqrt(v / bc2) + eps)
    if weight_decay:
        upd += weight_decay * p
    p -= lr * upd


def softmax_forward(x, scale=1.0):
    """Row-wise stable softmax of ``scale * x`` for a 2-D array, scale > 0."""
    e = x - x.max(axis=1, keepdims=True)
    if scale != 1.0:
        e *= x.dtype.type(scale)
    e = np.exp(e, out=e)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_backward(g, y, scale=1.0):
    dx = y * (g - (g * y).sum(axis=1, keepdims=True))
    if scale != 1.0:
        dx *= y.dtype.type(scale)
    return dx
