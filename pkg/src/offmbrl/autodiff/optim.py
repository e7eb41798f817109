"""Adam, gradient clipping, and target-network averaging."""

from __future__ import annotations

import math

import numpy as np

from offmbrl.autodiff.tensor import Tensor
from offmbrl.errors import ShapeError, TrainingError


class Adam:
    """Adaptive-moment estimation over a fixed set of named parameters."""

    def __init__(self, named_params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        """Apply one update from the accumulated gradients.

        Parameters whose grad is unset are skipped; a non-finite gradient
        aborts with the offending parameter's name.
        """
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} ({name})")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
            m, v = self._m[i], self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


def _global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float((g * g).sum(dtype=np.float64))
    return math.sqrt(total)


def clip_grad_norm(grads, threshold: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``threshold``.

    Returns the pre-clip norm. The scale is re-applied if float32 rounding
    left the norm a hair above the threshold.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = _global_norm(grads)
    current = norm
    for _ in range(8):
        if current <= threshold:
            break
        # a nudge below one float32 ulp would round away and stall the loop
        scale = min(threshold / current, 1.0 - 1e-7)
        for g in grads:
            g *= scale
        current = _global_norm(grads)
    return norm


def ema_update(target_params, online_params, momentum: float):
    """theta_target <- (1 - m) * theta_target + m * theta_online, elementwise."""
    if not 0.0 < momentum <= 1.0:
        raise ValueError("momentum must be in (0, 1]")
    for t, o in zip(target_params, online_params):
        td = t.data if isinstance(t, Tensor) else t
        od = o.data if isinstance(o, Tensor) else o
        if td.shape != od.shape:
            raise ShapeError(f"target shape {td.shape} != online shape {od.shape}")
        td *= 1.0 - momentum
        td += momentum * od
