"""Dense numeric kernels: convolution, batch norm, linear, pooling, SGD.

Everything operates on float64 numpy arrays in NCHW layout (batch,
channels, height, width). Backward passes are hand-written per layer;
there is no autodiff graph. Convolution is cross-correlation (no kernel
flip), the universal deep-learning convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ConvFilter",
    "conv2d_forward",
    "conv2d_backward",
    "im2col",
    "col2im",
    "conv_output_size",
    "BatchNorm2d",
    "global_avg_pool",
    "global_avg_pool_backward",
    "linear_forward",
    "linear_backward",
    "relu_forward",
    "relu_backward",
    "softmax_cross_entropy",
    "SGD",
    "cosine_lr",
]


def _check_4d(x: np.ndarray, name: str) -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ValueError(f"{name} must be a 4-D array (N, C, H, W), got "
                         f"{getattr(x, 'shape', type(x))}")


@dataclass
class ConvFilter:
    """Weights plus geometry for one convolution.

    weights has shape (out_channels, in_channels, k, k); stride and
    padding apply symmetrically to both spatial dims.
    """

    weights: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.weights.ndim != 4:
            raise ValueError(f"filter weights must be 4-D, got shape {self.weights.shape}")
        if self.weights.shape[2] != self.weights.shape[3]:
            raise ValueError(f"only square kernels are supported, got {self.weights.shape[2:]}")
        if self.kernel_size < 1:
            raise ValueError("kernel size must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("filter weights contain non-finite values")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Unfold x into a (N*H'*W', C*k*k) patch matrix.

    Column order within a row is channel-major then kernel row/col, which
    fixes the accumulation order of the matmul-based convolution.
    """
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, pad)
    ow = conv_output_size(w, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"convolution geometry yields empty output: input {h}x{w}, "
            f"k={k}, stride={stride}, pad={pad}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * k * k), oh, ow


def col2im(gcols: np.ndarray, x_shape: tuple[int, ...], k: int, stride: int,
           pad: int) -> np.ndarray:
    """Scatter-add patch-matrix gradients back to input layout (inverse of im2col)."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, k, stride, pad)
    ow = conv_output_size(w, k, stride, pad)
    g6 = gcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += g6[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:pad + h, pad:pad + w]
    return gx


def conv2d_forward(x: np.ndarray, filt: ConvFilter) -> np.ndarray:
    """Cross-correlate x with the filter bank.

    Output shape is (N, out_channels, H', W') with
    H' = floor((H + 2*pad - k) / stride) + 1.
    """
    _check_4d(x, "conv input")
    if x.shape[1] != filt.in_channels:
        raise ValueError(
            f"conv input has {x.shape[1]} channels but filter expects {filt.in_channels}")
    cols, oh, ow = im2col(x, filt.kernel_size, filt.stride, filt.padding)
    wmat = filt.weights.reshape(filt.out_channels, -1)
    y = cols @ wmat.T
    return np.ascontiguousarray(
        y.reshape(x.shape[0], oh, ow, filt.out_channels).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, filt: ConvFilter,
                    grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of conv2d_forward w.r.t. input and weights."""
    _check_4d(x, "conv input")
    _check_4d(grad_out, "conv grad_out")
    k, stride, pad = filt.kernel_size, filt.stride, filt.padding
    oh = conv_output_size(x.shape[2], k, stride, pad)
    ow = conv_output_size(x.shape[3], k, stride, pad)
    expect = (x.shape[0], filt.out_channels, oh, ow)
    if grad_out.shape != expect:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward "
                         f"output shape {expect}")
    cols, _, _ = im2col(x, k, stride, pad)
    gy_mat = grad_out.transpose(0, 2, 3, 1).reshape(-1, filt.out_channels)
    grad_w = (gy_mat.T @ cols).reshape(filt.weights.shape)
    gcols = gy_mat @ filt.weights.reshape(filt.out_channels, -1)
    grad_x = col2im(gcols, x.shape, k, stride, pad)
    return grad_x, grad_w


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Training mode normalizes with batch statistics (biased variance) and
    blends them into the running buffers as
    ``running = (1 - momentum) * running + momentum * batch``.
    Evaluation mode uses the running buffers and refuses to run before
    any batch has been seen.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("eps must be > 0")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.batches_tracked = 0
        self._cache = None
        self.grad_gamma = None
        self.grad_beta = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        _check_4d(x, "batchnorm input")
        if x.shape[1] != self.channels:
            raise ValueError(
                f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            std = np.sqrt(var + self.eps)
            xhat = (x - mean[None, :, None, None]) / std[None, :, None, None]
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
            self.batches_tracked += 1
            self._cache = (xhat, std)
        else:
            if self.batches_tracked == 0:
                raise ValueError("batchnorm evaluation requested before any "
                                 "training batch set the running statistics")
            std = np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) / std[None, :, None, None]
            self._cache = None
        return self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise ValueError("batchnorm backward requires a cached training-mode forward")
        xhat, std = self._cache
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        self.grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
        self.grad_beta = grad_out.sum(axis=(0, 2, 3))
        gxhat = grad_out * self.gamma[None, :, None, None]
        s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (gxhat - s1 / m - xhat * s2 / m) / std[None, :, None, None]


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Reduce each feature map to its spatial mean; output (N, C, 1, 1)."""
    _check_4d(x, "pool input")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"global_avg_pool needs non-empty spatial dims, got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.broadcast_to(grad_out / (h * w),
                           grad_out.shape[:2] + (h, w)).copy()


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map x @ weight + bias with weight shaped (in_features, out_features)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear expects (N, {weight.shape[0]}) input, got "
                         f"{getattr(x, 'shape', None)}")
    return x @ weight + bias


def linear_backward(x: np.ndarray, weight: np.ndarray,
                    grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != (x.shape[0], weight.shape[1]):
        raise ValueError(f"linear grad_out shape {grad_out.shape} does not match "
                         f"({x.shape[0]}, {weight.shape[1]})")
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 is taken as 0.
    return grad_out * (x > 0)


def softmax_cross_entropy(logits: np.ndarray,
                          labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits (N, K) and labels (N,) required, got "
                         f"{logits.shape} / {labels.shape}")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    logp = z - np.log(e.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


@dataclass
class SGD:
    """SGD with Nesterov momentum and classical (gradient-coupled) weight decay.

    Update recurrence, per parameter p with gradient g:

        d = g + weight_decay * p
        v = momentum * v - lr * d
        p = p + momentum * v - lr * d      (Nesterov on)
        p = p + v                          (Nesterov off)

    Parameters whose names are in ``no_decay`` skip the decay term.
    """

    params: dict[str, np.ndarray]
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    no_decay: frozenset[str] = frozenset()
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.no_decay = frozenset(self.no_decay)
        for name, p in self.params.items():
            if name not in self.velocities:
                self.velocities[name] = np.zeros_like(p)
            elif self.velocities[name].shape != p.shape:
                raise ValueError(f"velocity shape mismatch for {name!r}")

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter "
                                 f"{name!r} of shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for parameter {name!r}")
            wd = 0.0 if name in self.no_decay else self.weight_decay
            d = g + wd * p if wd else g
            v = self.velocities[name]
            v *= self.momentum
            v -= lr * d
            if self.nesterov:
                p += self.momentum * v - lr * d
            else:
                p += v


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """Cosine-annealed learning rate, evaluated per epoch."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if lr0 <= 0:
        raise ValueError("base learning rate must be > 0")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))
