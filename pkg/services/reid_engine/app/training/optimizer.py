"""
RTRL DESK - Optimizer
Elementwise gradient clipping and Adam with bias correction.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.autograd.tensor import Tensor
from app.core.errors import ContractError, DimensionError


def clip_gradients(params: Sequence[Tensor], bound: float) -> None:
    """Clamp every gradient component to [-bound, bound] in place"""
    if bound <= 0:
        raise ContractError(f"clip bound must be positive, got {bound}")
    for param in params:
        if param.requires_grad:
            np.clip(param.grad, -bound, bound, out=param.grad)


class AdamState:
    """First and second moment buffers per parameter name plus the step count"""

    def __init__(self) -> None:
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def ensure(self, name: str, param: Tensor) -> Tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros_like(param.data)
            self.v[name] = np.zeros_like(param.data)
        if self.m[name].shape != param.shape:
            raise DimensionError(f"adam state for '{name}' has shape {self.m[name].shape}, parameter {param.shape}")
        return self.m[name], self.v[name]


def adam_step(
    params: Sequence[Tuple[str, Tensor]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: Optional[int] = None,
) -> None:
    """
    One Adam update of every (name, param) using param.grad.
    t defaults to state.step + 1 and is recorded in state.step.
    """
    t = state.step + 1 if t is None else t
    if t < 1:
        raise ContractError(f"adam step count must be >= 1, got {t}")
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, param in params:
        m, v = state.ensure(name, param)
        grad = param.grad
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)
    state.step = t


class Adam:
    """Adam over a fixed list of named parameters"""

    def __init__(self, params: List[Tuple[str, Tensor]], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for _, param in self.params:
            param.grad = None

    def step(self, clip: Optional[float] = None) -> None:
        if clip is not None:
            clip_gradients([p for _, p in self.params], clip)
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)
