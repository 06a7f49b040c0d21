#!/usr/bin/env python3
"""
RGB-频率注意力模块 (RFAM)
U = concat(U1, U2) -> V = ReLU(BN(Conv1x1(U))) -> A = Sigmoid(Conv3x3(V)) -> A1, A2
融合: U~ = A1 * U1 + A2 * U2
"""

import logging
from dataclasses import dataclass

import numpy as np

from core import diffcore as dc
from core.diffcore import Tensor
from core.errors import DimensionError
from network.layers import BatchNorm2d, Conv2d, ParameterStore

logger = logging.getLogger(__name__)

STAGE_NAMES = ("low", "mid", "high")


@dataclass
class StageFeatures:
    """某一语义层两条流的特征，u1 为频率流，u2 为 RGB 流"""
    layer: str
    u1: Tensor
    u2: Tensor


@dataclass
class RfamOutput:
    a1: Tensor
    a2: Tensor
    fused: Tensor


def fuse_streams(u1: Tensor, u2: Tensor, a1: Tensor, a2: Tensor) -> Tensor:
    """注意力加权求和，注意力图在通道维广播"""
    return dc.add(dc.mul(a1, u1), dc.mul(a2, u2))


def verify_fusion(output: RfamOutput, stage: StageFeatures, atol: float = 1e-10):
    """用独立的 numpy 计算核对融合结果"""
    expected = output.a1.data * stage.u1.data + output.a2.data * stage.u2.data
    if not np.allclose(output.fused.data, expected, rtol=0.0, atol=atol):
        raise AssertionError(f"{stage.layer} 层融合结果与逐元素核对不一致")


class RFAM:
    """单个语义层上的注意力融合模块"""

    def __init__(self, name: str, channels: int, rng: np.random.Generator, store: ParameterStore):
        self.name = name
        self.channels = channels
        self.fuse_conv = store.register(Conv2d(f"{name}.conv1x1", 2 * channels, 2 * channels, 1, rng))
        self.fuse_bn = store.register(BatchNorm2d(f"{name}.bn", 2 * channels))
        self.attention_conv = store.register(Conv2d(f"{name}.conv3x3", 2 * channels, 2, 3, rng))

    def __call__(self, stage: StageFeatures, training: bool, verify: bool = False) -> RfamOutput:
        if stage.u1.shape != stage.u2.shape:
            raise DimensionError(f"{stage.layer} 层两条流形状不一致: {stage.u1.shape} vs {stage.u2.shape}")
        if stage.u1.shape[-1] != self.channels:
            raise DimensionError(f"{self.name} 期望 {self.channels} 通道，实际 {stage.u1.shape[-1]}")

        stacked = dc.concat([stage.u1, stage.u2], axis=-1)
        v = dc.relu(self.fuse_bn(self.fuse_conv(stacked), training))
        attention = dc.sigmoid(self.attention_conv(v))
        a1, a2 = dc.split(attention, [1, 1], axis=-1)
        output = RfamOutput(a1=a1, a2=a2, fused=fuse_streams(stage.u1, stage.u2, a1, a2))

        if verify or logger.isEnabledFor(logging.DEBUG):
            verify_fusion(output, stage)
        return output


def rfam(stage: StageFeatures, module: RFAM, training: bool = False) -> RfamOutput:
    """函数式入口"""
    return module(stage, training)
