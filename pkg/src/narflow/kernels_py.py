"""Pure-numpy implementations of the hot kernels.

Same call signatures and semantics as the compiled extension in
``_kernels.pyx``; the active implementation is chosen once at import time
by ``backend``. Row-wise kernels act on C-contiguous 2-d views
(rows x features); optimizer state is updated through flat 1-d views.
"""

import numpy as np

IS_COMPILED = False


def softmax_fwd(x):
    # Rows may contain -inf (masked scores); exp(-inf) -> exact 0.
    # A fully masked row yields all-zero probabilities, never NaN.
    m = np.max(x, axis=1, keepdims=True)
    finite = np.isfinite(m)
    y = np.exp(x - np.where(finite, m, 0.0))
    s = np.sum(y, axis=1, keepdims=True)
    y /= np.where(s == 0.0, 1.0, s)
    return y


def softmax_bwd(y, dy):
    dot = np.sum(y * dy, axis=1, keepdims=True)
    return y * (dy - dot)


def layernorm_fwd(x, gain, bias, eps):
    mean = np.mean(x, axis=1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean) * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_bwd(xhat, rstd, gain, dy):
    dg = np.sum(dy * xhat, axis=0)
    db = np.sum(dy, axis=0)
    dyg = dy * gain
    dx = rstd[:, None] * (
        dyg - np.mean(dyg, axis=1, keepdims=True) - xhat * np.mean(dyg * xhat, axis=1, keepdims=True)
    )
    return dx, dg, db


def embedding_bwd(ids, dy, dw):
    # np.add.at is the correct (if slow) scatter-add; the compiled kernel
    # replaces it with a plain loop.
    np.add.at(dw, ids, dy)


def adam_step(p, g, m, v, vhat, lr, beta1, beta2, eps, t, amsgrad):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    if amsgrad:
        np.maximum(vhat, v, out=vhat)
        vcorr = vhat / (1.0 - beta2**t)
    else:
        vcorr = v / (1.0 - beta2**t)
    mcorr = m / (1.0 - beta1**t)
    p -= (lr * mcorr / (np.sqrt(vcorr) + eps)).astype(p.dtype)
