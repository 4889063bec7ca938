"""Forward/backward pairs for the layers of the deep decoder.

Activations are channels-last ``(N, H, W, C)``. Each ``*_forward`` returns
``(out, cache)``; the matching ``*_backward`` takes the upstream gradient
and the cache and returns gradients for the inputs and parameters.
"""
from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
LEAKY_SLOPE = 0.2


def _channel_sum(x):
    """Sum over every axis but the last; a matvec is much faster than ``sum(axis=(0, 1, 2))``."""
    flat = x.reshape(-1, x.shape[-1])
    return np.ones(flat.shape[0], dtype=x.dtype) @ flat


def dense_forward(x, w, b):
    """``x (N, c) @ w (c, F) + b``."""
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def tconv_pad(f: int) -> int:
    """Input-side padding that makes a stride-2, size-``f`` transposed conv double the extent.

    With output padding 1, ``(H - 1) * 2 - 2 * pad + f + 1 = 2 * H`` for odd ``f``.
    """
    return (f - 1) // 2


def tconv_forward(x, kernel, bias):
    """Stride-2 transposed convolution that maps ``H x W`` to ``2H x 2W``.

    ``kernel`` has shape ``(C_in, C_out, f, f)``. Output pixel ``2i + a - pad``
    receives ``x[i] * kernel[..., a, b]``; the trailing row/column that the
    output padding adds only collects the overhanging taps.
    """
    n, h, w, cin = x.shape
    _, cout, f, _ = kernel.shape
    p = tconv_pad(f)
    kr = kernel.transpose(0, 2, 3, 1).reshape(cin, f * f * cout)
    cols = (x.reshape(-1, cin) @ kr).reshape(n, h, w, f, f, cout)
    full = np.zeros((n, 2 * h + f, 2 * w + f, cout), dtype=x.dtype)
    for a in range(f):
        for b in range(f):
            full[:, a:a + 2 * h:2, b:b + 2 * w:2, :] += cols[:, :, :, a, b, :]
    out = full[:, p:p + 2 * h, p:p + 2 * w, :] + bias
    return out, (x, kernel)


def tconv_backward(dout, cache):
    x, kernel = cache
    n, h, w, cin = x.shape
    _, cout, f, _ = kernel.shape
    p = tconv_pad(f)
    dfull = np.zeros((n, 2 * h + f, 2 * w + f, cout), dtype=dout.dtype)
    dfull[:, p:p + 2 * h, p:p + 2 * w, :] = dout
    dcols = np.empty((n, h, w, f, f, cout), dtype=dout.dtype)
    for a in range(f):
        for b in range(f):
            dcols[:, :, :, a, b, :] = dfull[:, a:a + 2 * h:2, b:b + 2 * w:2, :]
    dcols = dcols.reshape(-1, f * f * cout)
    kr = kernel.transpose(0, 2, 3, 1).reshape(cin, f * f * cout)
    dx = (dcols @ kr.T).reshape(n, h, w, cin)
    dk = (x.reshape(-1, cin).T @ dcols).reshape(cin, f, f, cout).transpose(0, 3, 1, 2)
    return dx, dk, _channel_sum(dout)


def conv_same_forward(x, kernel, bias):
    """Stride-1, zero-padded, single-output-channel convolution (cross-correlation).

    ``kernel`` has shape ``(C_in, f, f)``; the output is ``(N, H, W)``. The
    channel contraction is one GEMM to ``f*f`` tap maps, which are then
    shifted into place.
    """
    n, h, w, cin = x.shape
    f = kernel.shape[1]
    p = f // 2
    taps = (x.reshape(-1, cin) @ kernel.reshape(cin, f * f)).reshape(n, h, w, f, f)
    taps = np.pad(taps, ((0, 0), (p, p), (p, p), (0, 0), (0, 0)))
    out = np.zeros((n, h, w), dtype=x.dtype) + bias[0]
    for a in range(f):
        for b in range(f):
            # out[i] += x[i + (a, b) - p] . kernel[:, a, b]
            out += taps[:, a:a + h, b:b + w, a, b]
    return out, (x, kernel)


def conv_same_backward(dout, cache):
    x, kernel = cache
    n, h, w, cin = x.shape
    f = kernel.shape[1]
    p = f // 2
    dp = np.pad(dout, ((0, 0), (p, p), (p, p)))
    # shifted[j, (a, b)] = dout[j - (a, b) + p]
    shifted = np.empty((n, h, w, f, f), dtype=dout.dtype)
    for a in range(f):
        for b in range(f):
            shifted[..., a, b] = dp[:, 2 * p - a:2 * p - a + h, 2 * p - b:2 * p - b + w]
    shifted = shifted.reshape(-1, f * f)
    xf = x.reshape(-1, cin)
    dx = (shifted @ kernel.reshape(cin, f * f).T).reshape(x.shape)
    dk = (xf.T @ shifted).reshape(kernel.shape)
    return dx, dk, np.array([dout.sum()], dtype=dout.dtype)


def bn_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-channel batch norm over ``(N, H, W)``.

    In training mode the minibatch statistics are used and also returned so
    the caller can update its running averages.
    """
    if train:
        m = x.size // x.shape[-1]
        mean = _channel_sum(x) / m
        centred = x - mean
        var = _channel_sum(centred * centred) / m
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    out = gamma * xhat + beta
    return out, (xhat, inv, gamma, train), (mean, var)


def bn_backward(dout, cache):
    xhat, inv, gamma, train = cache
    dgamma = _channel_sum(dout * xhat)
    dbeta = _channel_sum(dout)
    if not train:
        return dout * (gamma * inv), dgamma, dbeta
    m = xhat.size // xhat.shape[-1]
    # dxhat sums are gamma * dbeta and gamma * dgamma
    dx = (gamma * inv / m) * (m * dout - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


def leaky_forward(x):
    slope = np.where(x > 0, x.dtype.type(1), x.dtype.type(LEAKY_SLOPE))
    return x * slope, slope


def leaky_backward(dout, slope):
    return dout * slope
