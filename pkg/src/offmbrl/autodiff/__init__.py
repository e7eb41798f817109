from offmbrl.autodiff.tensor import Tensor, no_grad
from offmbrl.autodiff.nn import (
    CategoricalHead,
    CategoricalPolicy,
    GaussianHead,
    GaussianPolicy,
    Mlp,
    categorical_log_prob,
    categorical_mode_onehot,
    mlp_forward,
    squashed_gaussian_sample,
    squashed_log_prob,
    squashed_mean,
    straight_through_onehot,
)
from offmbrl.autodiff.optim import Adam, clip_grad_norm, ema_update
from offmbrl.autodiff.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "CategoricalHead",
    "CategoricalPolicy",
    "GaussianHead",
    "GaussianPolicy",
    "Mlp",
    "Tensor",
    "categorical_log_prob",
    "categorical_mode_onehot",
    "clip_grad_norm",
    "ema_update",
    "load_checkpoint",
    "mlp_forward",
    "no_grad",
    "save_checkpoint",
    "squashed_gaussian_sample",
    "squashed_log_prob",
    "squashed_mean",
    "straight_through_onehot",
]
