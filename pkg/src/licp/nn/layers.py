"""Neural-net layers with exact analytic backward passes.

All computation is float64; checkpoints store float32. Convolution is
cross-correlation (no kernel flip), matching the usual deep-learning
convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _windows(xp, k, stride):
    """(C, D', H', W', k, k, k) sliding windows of a padded (C,D,H,W) input."""
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    return win[:, ::stride, ::stride, ::stride]


def conv3d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """3-D cross-correlation. x: (C_in,D,H,W); kernels: (C_out,C_in,k,k,k)."""
    x = np.asarray(x, dtype=float)
    kernels = np.asarray(kernels, dtype=float)
    if x.ndim != 4 or kernels.ndim != 5 or x.shape[0] != kernels.shape[1]:
        raise ShapeMismatch(f"conv3d: x {x.shape} vs kernels {kernels.shape}")
    k = kernels.shape[2]
    if kernels.shape[3] != k or kernels.shape[4] != k:
        raise ShapeMismatch("conv3d kernels must be cubic")
    if any(_out_size(n, k, stride, pad) < 1 for n in x.shape[1:]):
        raise ShapeMismatch("conv3d: output would be empty")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride)
    c_out = kernels.shape[0]
    od, oh, ow = win.shape[1:4]
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(od * oh * ow, -1)
    out = cols @ kernels.reshape(c_out, -1).T
    if bias is not None:
        out = out + np.asarray(bias, dtype=float)[None, :]
    return out.T.reshape(c_out, od, oh, ow)


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray,
                    stride: int = 1, pad: int = 0):
    """Gradients of conv3d w.r.t. (x, kernels, bias)."""
    x = np.asarray(x, dtype=float)
    kernels = np.asarray(kernels, dtype=float)
    grad_out = np.asarray(grad_out, dtype=float)
    k = kernels.shape[2]
    c_out = kernels.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride)
    od, oh, ow = win.shape[1:4]
    if grad_out.shape != (c_out, od, oh, ow):
        raise ShapeMismatch(f"conv3d_backward: grad {grad_out.shape} != "
                            f"{(c_out, od, oh, ow)}")
    g2 = grad_out.reshape(c_out, -1)                      # (C_out, N)
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(od * oh * ow, -1)
    d_kernels = (g2 @ cols).reshape(kernels.shape)
    d_bias = g2.sum(axis=1)
    d_xp = np.zeros_like(xp)
    g = grad_out
    for i in range(k):
        for j in range(k):
            for l in range(k):
                # contribution of kernel tap (i,j,l) to each input voxel
                tmp = np.einsum("oc,odhw->cdhw", kernels[:, :, i, j, l], g)
                d_xp[:,
                     i:i + stride * od:stride,
                     j:j + stride * oh:stride,
                     l:l + stride * ow:stride] += tmp
    if pad:
        d_x = d_xp[:, pad:-pad, pad:-pad, pad:-pad]
    else:
        d_x = d_xp
    return d_x, d_kernels, d_bias


def fc(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Fully connected layer y = x @ W.T + b; x is (in,) or (N, in)."""
    x = np.asarray(x, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if x.shape[-1] != weights.shape[1]:
        raise ShapeMismatch(f"fc: x {x.shape} vs weights {weights.shape}")
    return x @ weights.T + np.asarray(bias, dtype=float)


def fc_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray):
    grad_out = np.asarray(grad_out, dtype=float)
    x = np.asarray(x, dtype=float)
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    d_w = g2.T @ x2
    d_b = g2.sum(axis=0)
    d_x = (g2 @ weights).reshape(x.shape)
    return d_x, d_w, d_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.asarray(grad_out, dtype=float) * (np.asarray(x) > 0.0)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None,
            train: bool):
    """Inverted dropout. Returns (y, mask); mask is None in eval mode or at
    rate 0. Survivors are rescaled by 1/(1-rate)."""
    x = np.asarray(x, dtype=float)
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def dropout_backward(grad_out: np.ndarray, mask, rate: float) -> np.ndarray:
    if mask is None:
        return np.asarray(grad_out, dtype=float)
    return np.asarray(grad_out, dtype=float) * mask / (1.0 - rate)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          ignore_label: int = -1):
    """Mean CE over non-ignored rows. logits: (N, C); labels: (N,) ints.
    Returns (loss, d_logits)."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels).reshape(-1)
    if logits.ndim != 2 or len(labels) != len(logits):
        raise ShapeMismatch(f"softmax CE: logits {logits.shape}, "
                            f"labels {labels.shape}")
    valid = labels != ignore_label
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits)
    ls = log_softmax(logits, axis=1)
    rows = np.nonzero(valid)[0]
    loss = -ls[rows, labels[rows]].sum() / n
    d = softmax(logits, axis=1)
    d[rows, labels[rows]] -= 1.0
    d[~valid] = 0.0
    return float(loss), d / n


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.001
    decay_factor: float = 0.95
    decay_interval: int = 1000

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_interval < 1:
            raise ValueError("decay_interval must be >= 1")

    def lr_at(self, step: int) -> float:
        return self.learning_rate * self.decay_factor ** (step // self.decay_interval)


def sgd_step(params: dict, grads: dict, cfg: SgdConfig, step_index: int) -> dict:
    """p <- p - lr(step) * g with staircase decay. Returns new param dict."""
    lr = cfg.lr_at(step_index)
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = np.asarray(g, dtype=float)
        if g.shape != np.shape(p):
            raise ShapeMismatch(f"sgd_step: {name} {np.shape(p)} vs {g.shape}")
        out[name] = p - lr * g
    return out
