"""Minimal numpy layers with hand-written backward passes.

Activations are 2-D (positions, channels); a 1x1 convolution over a
(N, k, C) tensor is a matrix product on its (N*k, C) reshape.
"""
from __future__ import annotations

import numpy as np


def linear_forward(x, W, b=None):
    out = x @ W
    if b is not None:
        out = out + b
    return out, (x, W)


def linear_backward(dout, cache):
    x, W = cache
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, 0.0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool, eps: float, momentum: float):
    """Per-channel BN over all rows of ``x``.

    Returns (out, cache, new_running_mean, new_running_var); running stats are
    returned rather than mutated so finite-difference probes stay side-effect free.
    Running variance uses the unbiased estimate.
    """
    if train:
        mu = x.mean(axis=0)
        xc = x - mu
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        m = x.shape[0]
        unbiased = var * m / max(m - 1, 1)
        new_mean = (1.0 - momentum) * running_mean + momentum * mu
        new_var = (1.0 - momentum) * running_var + momentum * unbiased
        cache = (xhat, inv, gamma)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv
        new_mean, new_var = running_mean, running_var
        cache = None
    return gamma * xhat + beta, cache, new_mean, new_var


def batchnorm_backward(dout, cache):
    xhat, inv, gamma = cache
    m = dout.shape[0]
    dbeta = dout.sum(axis=0)
    dgamma = (dout * xhat).sum(axis=0)
    dxhat = dout * gamma
    dx = (inv / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def max_over_neighbors(x):
    """Max over axis 1 of (N, k, C); ties route to the lowest neighbour index."""
    idx = np.argmax(x, axis=1)
    out = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
    return out, (idx, x.shape)


def max_over_neighbors_backward(dout, cache):
    idx, shape = cache
    dx = np.zeros(shape)
    np.put_along_axis(dx, idx[:, None, :], dout[:, None, :], axis=1)
    return dx


def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
