#!/usr/bin/env python3
"""
Adam 优化器（带偏差修正与解耦权重衰减）及学习率减半调度
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from core.diffcore import Tensor
from core.errors import DimensionError, TrainingError

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_state(params: Dict[str, Tensor]) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
    )


def lr_at_epoch(base_lr: float, epoch: int, halving_period: int) -> float:
    """每 halving_period 个 epoch 学习率减半（epoch 从 0 计）"""
    return base_lr * 0.5 ** (epoch // halving_period)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: OptimizerState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 0.0,
              eps: float = 1e-8) -> OptimizerState:
    """
    原地更新参数

        p <- p - lr * wd * p
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)

    Raises:
        TrainingError: 梯度含 NaN/Inf，信息中给出参数名；此时不更新任何参数
    """
    resolved = {}
    for name, param in params.items():
        grad = grads.get(name)
        grad = np.zeros_like(param.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise DimensionError(f"参数 {name} 梯度形状 {grad.shape} 与参数 {param.shape} 不一致")
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"参数 {name} 的梯度包含 NaN/Inf，终止训练")
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        resolved[name] = grad

    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        grad = resolved[name]
        if weight_decay:
            param.data -= lr * weight_decay * param.data
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    """持有参数与状态的简单封装"""

    def __init__(self, params: Dict[str, Tensor], lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999,
                 weight_decay: float = 1e-5, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = init_state(params)

    def step(self):
        grads = {name: p.grad for name, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.weight_decay, self.eps)

    def zero_grad(self):
        for param in self.params.values():
            param.grad = None
