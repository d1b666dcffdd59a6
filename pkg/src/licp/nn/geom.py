"""Fully convolutional 3-D geometry network: per-voxel class labels plus a
global shape embedding (global average pooling of the penultimate features).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyDataset, ShapeMismatch
from .layers import (
    SgdConfig,
    conv3d,
    conv3d_backward,
    relu,
    relu_backward,
    sgd_step,
    softmax_cross_entropy,
)


@dataclass(frozen=True)
class GeomNetConfig:
    grid_dims: tuple = (32, 32, 32)
    conv_channels: tuple = (16, 32, 32, 32)
    embed_channels: int = 128
    n_classes: int = 5

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    def to_dict(self):
        return {
            "grid_dims": list(self.grid_dims),
            "conv_channels": list(self.conv_channels),
            "embed_channels": self.embed_channels,
            "n_classes": self.n_classes,
        }

    @staticmethod
    def from_dict(d):
        return GeomNetConfig(tuple(d["grid_dims"]), tuple(d["conv_channels"]),
                             d["embed_channels"], d["n_classes"])


@dataclass
class GeomNetParams:
    config: GeomNetConfig
    arrays: dict = field(default_factory=dict)


def init_geom_net(config: GeomNetConfig, seed: int = 0) -> GeomNetParams:
    """He-initialized parameters; biases zero."""
    rng = np.random.default_rng(seed)
    arrays = {}
    c_in = 1
    for i, c_out in enumerate(config.conv_channels):
        fan_in = c_in * 27
        arrays[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                          (c_out, c_in, 3, 3, 3))
        arrays[f"conv{i}_b"] = np.zeros(c_out)
        c_in = c_out
    arrays["embed_w"] = rng.normal(0.0, np.sqrt(2.0 / c_in),
                                   (config.embed_channels, c_in, 1, 1, 1))
    arrays["embed_b"] = np.zeros(config.embed_channels)
    arrays["head_w"] = rng.normal(0.0, np.sqrt(2.0 / config.embed_channels),
                                  (config.n_classes, config.embed_channels,
                                   1, 1, 1))
    arrays["head_b"] = np.zeros(config.n_classes)
    return GeomNetParams(config, arrays)


def geom_net_forward(values: np.ndarray, params: GeomNetParams,
                     want_cache: bool = False):
    """values: (D,H,W) TDF grid. Returns (voxel_logits (C,D,H,W),
    embedding (E,)) and a cache when requested."""
    cfg = params.config
    values = np.asarray(values, dtype=float)
    if values.shape != tuple(cfg.grid_dims):
        raise ShapeMismatch(f"expected grid {cfg.grid_dims}, got {values.shape}")
    a = params.arrays
    x = values[None]
    pre, post = [], []
    for i in range(len(cfg.conv_channels)):
        z = conv3d(x, a[f"conv{i}_w"], a[f"conv{i}_b"], stride=1, pad=1)
        pre.append(x)
        post.append(z)
        x = relu(z)
    z_embed = conv3d(x, a["embed_w"], a["embed_b"])
    p = relu(z_embed)
    embedding = p.mean(axis=(1, 2, 3))
    logits = conv3d(p, a["head_w"], a["head_b"])
    out = (logits, embedding)
    if want_cache:
        return out, {"pre": pre, "post": post, "feat": x, "z_embed": z_embed,
                     "p": p}
    return out


def geom_net_backward(d_logits: np.ndarray, params: GeomNetParams, cache,
                      d_embedding: np.ndarray | None = None) -> dict:
    """Parameter gradients given upstream gradients on the label logits and
    (optionally) the embedding."""
    cfg = params.config
    a = params.arrays
    grads = {}
    d_p, grads["head_w"], grads["head_b"] = conv3d_backward(
        d_logits, cache["p"], a["head_w"])
    if d_embedding is not None:
        n_vox = cache["p"][0].size
        d_p = d_p + np.asarray(d_embedding, dtype=float)[:, None, None, None] / n_vox
    d_z = relu_backward(d_p, cache["z_embed"])
    d_x, grads["embed_w"], grads["embed_b"] = conv3d_backward(
        d_z, cache["feat"], a["embed_w"])
    for i in reversed(range(len(cfg.conv_channels))):
        d_z = relu_backward(d_x, cache["post"][i])
        d_x, grads[f"conv{i}_w"], grads[f"conv{i}_b"] = conv3d_backward(
            d_z, cache["pre"][i], a[f"conv{i}_w"], stride=1, pad=1)
    return grads


def geom_net_loss(values: np.ndarray, labels: np.ndarray,
                  params: GeomNetParams):
    """Supervised per-voxel CE (label -1 = ignore). Returns (loss, grads)."""
    (logits, _), cache = geom_net_forward(values, params, want_cache=True)
    c = logits.shape[0]
    flat = logits.reshape(c, -1).T
    loss, d_flat = softmax_cross_entropy(flat, np.asarray(labels).reshape(-1),
                                         ignore_label=-1)
    d_logits = d_flat.T.reshape(logits.shape)
    return loss, geom_net_backward(d_logits, params, cache)


def train_geom_net(dataset, cfg: SgdConfig, params: GeomNetParams,
                   steps: int, batch_size: int = 4, seed: int = 0,
                   start_step: int = 0, log_every: int = 1,
                   progress=None):
    """Minibatch SGD over (values, labels) pairs. Returns (params, loss_log)
    where loss_log is a list of (step, loss) rows."""
    if len(dataset) == 0:
        raise EmptyDataset("train_geom_net needs samples")
    rng = np.random.default_rng(seed)
    loss_log = []
    arrays = params.arrays
    for step in range(start_step, start_step + steps):
        idx = rng.integers(0, len(dataset), size=batch_size)
        total = None
        loss_sum = 0.0
        for j in idx:
            values, labels = dataset[j]
            loss, grads = geom_net_loss(values, labels,
                                        GeomNetParams(params.config, arrays))
            loss_sum += loss
            if total is None:
                total = grads
            else:
                for k in total:
                    total[k] += grads[k]
        for k in total:
            total[k] /= batch_size
        arrays = sgd_step(arrays, total, cfg, step)
        if step % log_every == 0:
            loss_log.append((step, loss_sum / batch_size))
        if progress is not None:
            progress(step, loss_sum / batch_size)
    return GeomNetParams(params.config, arrays), loss_log
