"""Multi-channel zero-padded cross-correlation layers.

These back the learned correction operators: plain linear convolution stacks
with no bias and no activation. Two equivalent execution schemes are used,
picked by channel shape; both compute the same zero-padded correlation, only
the summation order differs (fp differences at the few-ulp level).

Arrays are channel-first: x has shape (C_in, ny, nx), weights
(C_out, C_in, kh, kw).
"""

import numpy as np


def _offsets(kh, kw):
    return [(a, b) for a in range(kh) for b in range(kw)]


def conv_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded correlation of a multi-channel field with a weight bank."""
    c_out, c_in, kh, kw = w.shape
    if x.shape[0] != c_in:
        raise ValueError(f"input has {x.shape[0]} channels, weights expect {c_in}")
    h, wd = x.shape[1:]
    ra, rb = kh // 2, kw // 2
    if c_in == 1:
        # im2col on the single input channel, then one small GEMM
        xp = np.zeros((h + 2 * ra, wd + 2 * rb))
        xp[ra:ra + h, rb:rb + wd] = x[0]
        p = np.empty((h * wd, kh * kw))
        for k, (a, b) in enumerate(_offsets(kh, kw)):
            p[:, k] = xp[a:a + h, b:b + wd].ravel()
        out = p @ w.reshape(c_out, kh * kw).T
        return np.ascontiguousarray(out.T).reshape(c_out, h, wd)
    # channel-mixing GEMM on the padded plane, then shifted accumulation
    xp = np.zeros((c_in, h + 2 * ra, wd + 2 * rb))
    xp[:, ra:ra + h, rb:rb + wd] = x
    wall = np.ascontiguousarray(w.transpose(2, 3, 0, 1)).reshape(kh * kw * c_out, c_in)
    z = (wall @ xp.reshape(c_in, -1)).reshape(kh * kw, c_out, h + 2 * ra, wd + 2 * rb)
    out = np.zeros((c_out, h, wd))
    for k, (a, b) in enumerate(_offsets(kh, kw)):
        out += z[k, :, a:a + h, b:b + wd]
    return out


def adjoint_weights(w: np.ndarray) -> np.ndarray:
    """Weights of the adjoint layer: channels transposed, kernels flipped."""
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def conv_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint application: gradient w.r.t. the layer input."""
    return conv_forward(g, adjoint_weights(w))


def conv_kernel_grad(x: np.ndarray, g: np.ndarray, kh: int = 3, kw: int = 3) -> np.ndarray:
    """Gradient of sum(g * conv_forward(x, w)) w.r.t. w.

    dW[o,c,a,b] = sum_{y,x} g[o,y,x] * xpad[c,y+a,x+b].
    """
    c_in, h, wd = x.shape
    c_out = g.shape[0]
    ra, rb = kh // 2, kw // 2
    xp = np.zeros((c_in, h + 2 * ra, wd + 2 * rb))
    xp[:, ra:ra + h, rb:rb + wd] = x
    p = np.empty((h * wd, c_in * kh * kw))
    for k, (a, b) in enumerate(_offsets(kh, kw)):
        p[:, k::kh * kw] = xp[:, a:a + h, b:b + wd].reshape(c_in, -1).T
    dw = g.reshape(c_out, -1) @ p
    return dw.reshape(c_out, c_in, kh, kw)
