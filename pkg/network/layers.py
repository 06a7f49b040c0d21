#!/usr/bin/env python3
"""
带参数的网络层：卷积、批归一化、全连接，以及统一管理参数的 ParameterStore
"""

import logging
from typing import Dict, List, Optional

import numpy as np

from core import diffcore as dc
from core.diffcore import Tensor
from core.errors import CheckpointError, DimensionError

logger = logging.getLogger(__name__)


class Layer:
    """层基类：参数为 requires_grad 的 Tensor，缓冲区为普通 numpy 数组"""

    def __init__(self, name: str):
        self.name = name
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def _param(self, key: str, data: np.ndarray) -> Tensor:
        tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=f"{self.name}.{key}")
        self.params[key] = tensor
        return tensor


class Conv2d(Layer):
    """kxk 卷积，默认 same 填充"""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: Optional[int] = None, bias: bool = True):
        super().__init__(name)
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        std = np.sqrt(2.0 / (kernel_size * kernel_size * in_channels))
        self.weight = self._param("weight", rng.normal(0.0, std, (kernel_size, kernel_size, in_channels, out_channels)))
        self.bias = self._param("bias", np.zeros(out_channels)) if bias else None

    def __call__(self, x) -> Tensor:
        return dc.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Layer):

    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__(name)
        self.momentum = momentum
        self.eps = eps
        self.gamma = self._param("gamma", np.ones(channels))
        self.beta = self._param("beta", np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def __call__(self, x, training: bool) -> Tensor:
        return dc.batchnorm(x, self.gamma, self.beta, self.buffers["running_mean"], self.buffers["running_var"],
                            training=training, momentum=self.momentum, eps=self.eps)


class Dense(Layer):

    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__(name)
        std = np.sqrt(2.0 / in_features)
        self.weight = self._param("weight", rng.normal(0.0, std, (in_features, out_features)))
        self.bias = self._param("bias", np.zeros(out_features))

    def __call__(self, x) -> Tensor:
        return dc.dense(x, self.weight, self.bias)


class ParameterStore:
    """按注册顺序管理所有层，提供命名参数与 state_dict"""

    def __init__(self):
        self.layers: List[Layer] = []

    def register(self, layer: Layer) -> Layer:
        if any(existing.name == layer.name for existing in self.layers):
            raise ValueError(f"层名重复: {layer.name}")
        self.layers.append(layer)
        return layer

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {}
        for layer in self.layers:
            for key, tensor in layer.params.items():
                named[f"{layer.name}.{key}"] = tensor
        return named

    def named_buffers(self) -> Dict[str, np.ndarray]:
        named = {}
        for layer in self.layers:
            for key, array in layer.buffers.items():
                named[f"{layer.name}.{key}"] = array
        return named

    def zero_grad(self):
        for tensor in self.named_parameters().values():
            tensor.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: tensor.data.copy() for name, tensor in self.named_parameters().items()}
        state.update({name: array.copy() for name, array in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """原地写回参数与缓冲区，名称或形状不一致时报错"""
        targets = {name: tensor.data for name, tensor in self.named_parameters().items()}
        targets.update(self.named_buffers())
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise CheckpointError(f"参数名不一致: 缺少 {missing[:5]}，多余 {unexpected[:5]}")
        for name, target in targets.items():
            source = np.asarray(state[name], dtype=np.float64)
            if source.shape != target.shape:
                raise DimensionError(f"参数 {name} 形状不一致: {source.shape} vs {target.shape}")
            target[...] = source

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.named_parameters().values()))
