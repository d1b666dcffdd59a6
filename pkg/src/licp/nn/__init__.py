from .layers import (
    SgdConfig,
    conv3d,
    conv3d_backward,
    dropout,
    dropout_backward,
    fc,
    fc_backward,
    log_softmax,
    relu,
    relu_backward,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)
from .geom import (
    GeomNetConfig,
    GeomNetParams,
    geom_net_backward,
    geom_net_forward,
    init_geom_net,
    train_geom_net,
)
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "SgdConfig", "conv3d", "conv3d_backward", "dropout", "dropout_backward",
    "fc", "fc_backward", "log_softmax", "relu", "relu_backward", "sgd_step",
    "softmax", "softmax_cross_entropy",
    "GeomNetConfig", "GeomNetParams", "geom_net_backward", "geom_net_forward",
    "init_geom_net", "train_geom_net",
    "load_checkpoint", "save_checkpoint",
]
