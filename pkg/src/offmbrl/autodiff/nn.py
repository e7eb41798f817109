"""MLPs and the stochastic heads used by every agent in the package."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from offmbrl.autodiff import tensor as T
from offmbrl.autodiff.tensor import Tensor
from offmbrl.errors import ShapeError

INIT_SCHEME = "uniform-fan-in"

_ACTIVATIONS = {
    "elu": T.elu,
    "relu": T.relu,
    "tanh": T.ttanh,
    "identity": lambda x: x,
}


class Mlp:
    """A stack of linear layers with a shared hidden activation.

    The activation is applied between layers, never after the last one.
    Weights and biases are initialized uniform in +-1/sqrt(fan_in).
    """

    def __init__(self, rng, dims, activation="elu", dtype=np.float32, requires_grad=True):
        if len(dims) < 2:
            raise ShapeError("an Mlp needs at least an input and an output dimension")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.dims = tuple(int(d) for d in dims)
        self.activation = activation
        self.layers: list[tuple[Tensor, Tensor]] = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            b = rng.uniform(-bound, bound, size=(fan_out,)).astype(dtype)
            self.layers.append(
                (Tensor(w, requires_grad=requires_grad), Tensor(b, requires_grad=requires_grad))
            )

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        """Forward pass; ``frozen`` evaluates with parameters off the tape."""
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input dim {x.shape[-1]} does not match layer dim {self.in_dim}")
        act = _ACTIVATIONS[self.activation]
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            if frozen:
                w, b = w.detach(), b.detach()
            x = T.affine(x, w, b)
            if i < last:
                x = act(x)
        return x

    def named_params(self, prefix: str):
        for i, (w, b) in enumerate(self.layers):
            yield f"{prefix}.l{i}.w", w
            yield f"{prefix}.l{i}.b", b

    def target_copy(self) -> "Mlp":
        """A requires_grad=False clone for exponential-moving-average targets."""
        clone = object.__new__(Mlp)
        clone.dims = self.dims
        clone.activation = self.activation
        clone.layers = [
            (Tensor(w.data.copy()), Tensor(b.data.copy())) for w, b in self.layers
        ]
        return clone


def mlp_forward(mlp: Mlp, x: Tensor) -> Tensor:
    return mlp(x)


# -- stochastic heads ---------------------------------------------------------


@dataclass
class GaussianHead:
    """Squashed-Gaussian parameters: mean and clamped log standard deviation."""

    mean: Tensor
    log_std: Tensor


@dataclass
class CategoricalHead:
    """L independent categorical distributions with C categories each."""

    logits: Tensor  # (..., L, C)


class GaussianPolicy:
    """Policy trunk producing a state-dependent squashed Gaussian.

    The log-std output is squashed into ``log_std_range`` with a tanh rescale
    so the bound stays differentiable everywhere.
    """

    def __init__(self, rng, in_dim, action_dim, hidden, log_std_range=(-5.0, 2.0),
                 dtype=np.float32):
        self.action_dim = int(action_dim)
        self.log_std_range = (float(log_std_range[0]), float(log_std_range[1]))
        self.trunk = Mlp(rng, (in_dim, *hidden, 2 * action_dim), dtype=dtype)

    def head(self, z: Tensor, frozen: bool = False) -> GaussianHead:
        out = self.trunk(z, frozen=frozen)
        m = self.action_dim
        mean = out[..., :m]
        lo, hi = self.log_std_range
        log_std = lo + 0.5 * (hi - lo) * (T.ttanh(out[..., m:]) + 1.0)
        return GaussianHead(mean, log_std)

    def named_params(self, prefix: str):
        yield from self.trunk.named_params(prefix)


class CategoricalPolicy:
    """Policy trunk producing L x C logits for discrete abstract actions."""

    def __init__(self, rng, in_dim, num_blocks, num_classes, hidden, dtype=np.float32):
        self.num_blocks = int(num_blocks)
        self.num_classes = int(num_classes)
        self.trunk = Mlp(rng, (in_dim, *hidden, num_blocks * num_classes), dtype=dtype)

    @property
    def action_dim(self) -> int:
        return self.num_blocks * self.num_classes

    def head(self, z: Tensor, frozen: bool = False) -> CategoricalHead:
        out = self.trunk(z, frozen=frozen)
        logits = out.reshape(*out.shape[:-1], self.num_blocks, self.num_classes)
        return CategoricalHead(logits)

    def named_params(self, prefix: str):
        yield from self.trunk.named_params(prefix)


# -- Gaussian head ops --------------------------------------------------------


def squashed_gaussian_sample(head: GaussianHead, rng) -> tuple[Tensor, Tensor]:
    """Reparameterized tanh-Gaussian sample and its log-probability.

    The log-prob carries the tanh Jacobian correction, so it stays finite for
    any sample the head can produce.
    """
    eps = rng.standard_normal(head.mean.shape).astype(head.mean.dtype)
    x = head.mean + T.texp(head.log_std) * Tensor(eps)
    action = T.bounded_tanh(x)
    logp = T.gaussian_log_prob(x, head.mean, head.log_std) - T.tsum(
        T.tanh_log_det_jacobian(x), axis=-1
    )
    return action, logp


def squashed_mean(head: GaussianHead) -> Tensor:
    """Deterministic action: tanh of the Gaussian mean."""
    return T.bounded_tanh(head.mean)


def squashed_log_prob(head: GaussianHead, actions: np.ndarray, clip: float = 0.99) -> Tensor:
    """Log-probability of given (dataset) actions under the squashed Gaussian.

    Actions are clipped to magnitude ``clip`` before the atanh inversion.
    """
    a = np.clip(np.asarray(actions, dtype=head.mean.dtype.type), -clip, clip)
    x = np.arctanh(a)
    xt = Tensor(x)
    return T.gaussian_log_prob(xt, head.mean, head.log_std) - T.tsum(
        T.tanh_log_det_jacobian(xt), axis=-1
    )


# -- categorical head ops -----------------------------------------------------


def sample_block_onehot(probs: np.ndarray, rng) -> np.ndarray:
    """Inverse-CDF sample of a one-hot per categorical block. (..., L, C) -> same."""
    c = probs.shape[-1]
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    idx = np.minimum((cdf < u).sum(axis=-1), c - 1)
    return np.eye(c, dtype=probs.dtype)[idx]


def straight_through_onehot(head: CategoricalHead, rng) -> Tensor:
    """Block-one-hot sample flattened to length L*C with pass-through gradient.

    Forward values are exact zeros and ones; the backward pass treats the
    sample as the softmax probabilities.
    """
    probs = T.softmax(head.logits, axis=-1)
    hard = sample_block_onehot(probs.data, rng)
    out = T.straight_through(probs, hard)
    lead = out.shape[:-2]
    return out.reshape(*lead, out.shape[-2] * out.shape[-1])


def categorical_mode_onehot(head: CategoricalHead) -> np.ndarray:
    """Highest-probability one-hot per block, flattened; no gradient."""
    logits = head.logits.data
    idx = logits.argmax(axis=-1)
    onehot = np.eye(logits.shape[-1], dtype=logits.dtype)[idx]
    lead = onehot.shape[:-2]
    return onehot.reshape(*lead, onehot.shape[-2] * onehot.shape[-1])


def categorical_log_prob(head: CategoricalHead, onehot_flat: np.ndarray) -> Tensor:
    """Log-likelihood of a flattened block-one-hot action, summed over blocks."""
    logp = T.log_softmax(head.logits, axis=-1)
    shape = head.logits.shape
    target = np.asarray(onehot_flat, dtype=logp.dtype.type).reshape(shape)
    picked = logp * Tensor(target)
    return T.tsum(T.tsum(picked, axis=-1), axis=-1)
