"""Pure numpy implementations of the row-wise kernels.

Same signatures and semantics as the compiled ``gpght._kernels`` module; used
when the extension is not built or when ``GPGHT_PURE_PYTHON=1``.
"""
import numpy as np


def softmax_fwd(x, mask):
    valid = mask.astype(bool)
    empty = ~valid.any(axis=1)
    if empty.any():
        raise ValueError(f"masked_softmax: row {int(np.argmax(empty))} has no unmasked entry")
    z = np.where(valid, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm_fwd(x, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std[:, None], inv_std


def layernorm_bwd(xhat, inv_std, g):
    mg = g.mean(axis=1, keepdims=True)
    mgx = (g * xhat).mean(axis=1, keepdims=True)
    return inv_std[:, None] * (g - mg - xhat * mgx)
