"""Pure numpy dense-layer kernels; same contract as the compiled ``_kernels``."""
import numpy as np

ACT_LINEAR = 0
ACT_RELU = 1
ACT_TANH = 2


def dense_forward(x, W, b, act):
    out = x @ W.T
    out += b
    if act == ACT_RELU:
        np.maximum(out, 0.0, out=out)
    elif act == ACT_TANH:
        np.tanh(out, out=out)
    return out, bool(np.isfinite(out).all())


def dense_backward(x, W, out, g_out, act, need_dx):
    if act == ACT_RELU:
        g = np.where(out > 0.0, g_out, 0.0)
    elif act == ACT_TANH:
        g = g_out * (1.0 - out * out)
    else:
        g = g_out
    dW = g.T @ x
    db = g.sum(axis=0)
    dx = g @ W if need_dx else None
    return dW, db, dx
