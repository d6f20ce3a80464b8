"""
Adam optimizer with optional global-norm gradient clipping.
"""

from typing import Dict, Optional

import numpy as np

from model.autodiff import Tensor, zero_grads

_applied_updates = 0


def applied_updates() -> int:
    """Updates applied by every optimizer in this process"""
    return _applied_updates


class Adam:
    """Adaptive moment optimizer; `steps` counts applied parameter updates"""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: Optional[float] = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.steps = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        zero_grads(self.params.values())

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return float(np.sqrt(total))

    def step(self) -> None:
        global _applied_updates
        scale = 1.0
        if self.clip_norm:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.steps += 1
        _applied_updates += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            m_hat = self._m[name] / correction1
            v_hat = self._v[name] / correction2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
