"""First-order optimizers."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from neurodecode.core.nn import Parameter
from neurodecode.utils.errors import ConfigError, NumericError


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        max_grad_norm: float | None = None,
    ) -> None:
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        """Clear gradients of every managed parameter."""
        for param in self.params:
            param.grad = None

    def grad_norm(self) -> float:
        """Return the global L2 norm of the current gradients."""
        squares = [float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None]
        return float(np.sqrt(sum(squares)))

    def step(self) -> None:
        """Apply one update from the accumulated gradients."""
        self.t += 1
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for index, param in enumerate(self.params):
            if param.grad is None:
                continue
            grad = param.grad * scale
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            self.m[index] = self.beta1 * self.m[index] + (1 - self.beta1) * grad
            self.v[index] = self.beta2 * self.v[index] + (1 - self.beta2) * grad * grad
            m_hat = self.m[index] / bias1
            v_hat = self.v[index] / bias2
            param.data = param.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if not np.all(np.isfinite(param.data)):
                raise NumericError(f"parameter {param.name or index} became non-finite")


def minibatches(order: np.ndarray, batch_size: int, min_size: int = 2) -> list[np.ndarray]:
    """Split ``order`` into batches of ``batch_size`` rows.

    A tail shorter than ``min_size`` is merged into the previous batch so
    that batch statistics are never taken over a single row.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    order = np.asarray(order)
    batches = [order[start : start + batch_size] for start in range(0, order.size, batch_size)]
    if len(batches) > 1 and batches[-1].size < min_size:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches
