"""Pure-numpy fallback for the compiled row kernels in ``_kernels.pyx``.

Every function takes and returns C-contiguous float64 arrays. 2-D inputs are
``(rows, width)``; the reduction always runs over the last axis.
"""

import numpy as np


def layer_norm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    diff = x - mu
    var = (diff * diff).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = diff * rstd[:, None]
    return xhat * gain + bias, xhat, rstd


def layer_norm_backward(dy, xhat, rstd, gain):
    g = dy * gain
    s1 = g.mean(axis=1, keepdims=True)
    s2 = (g * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (g - s1 - xhat * s2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def softmax_forward(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, dy):
    return y * (dy - (y * dy).sum(axis=1, keepdims=True))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, bias_corr1, bias_corr2, decay):
    """In-place Adam step on flat arrays ``p``, ``m``, ``v``."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    update = lr * (m / bias_corr1) / (np.sqrt(v / bias_corr2) + eps)
    p *= decay
    p -= update
