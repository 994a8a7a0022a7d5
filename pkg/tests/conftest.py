"""Shared oracles and helpers: naive convolution loops and finite differences."""

import numpy as np
import pytest


def naive_conv2d(x, weights, stride=1, pad=0):
    """Seven-nested-loop cross-correlation reference. Slow, obviously correct."""
    n, c, h, w = x.shape
    co, ci, k, _ = weights.shape
    assert c == ci
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    y = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(ci):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (x[b, ch, i * stride + ki, j * stride + kj]
                                        * weights[o, ch, ki, kj])
                    y[b, o, i, j] = acc
    return y


def numerical_grad(f, x, eps=1e-5):
    """Central finite differences of a scalar function w.r.t. every entry of x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-8):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(20240229)
