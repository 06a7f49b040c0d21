#!/usr/bin/env python3
"""
多尺度块相似度模块 (MPSM)
1. 把 low/mid 融合特征双线性缩放到 high 的尺寸后按通道拼接
2. 把多尺度特征切成 k x k 个块（块大小 Ceil(H/k) x Ceil(W/k)，不足部分补 0）
3. 计算块两两之间的余弦相似度并映射到 [0,1]
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import pandas as pd

from core import diffcore as dc
from core.diffcore import Tensor
from core.errors import ConfigError, DimensionError
from core.image_io import save_image

logger = logging.getLogger(__name__)

DEFAULT_K = 5


@dataclass
class PatchSet:
    k: int
    patch_h: int
    patch_w: int
    vectors: Tensor  # (N, k*k, patch_h * patch_w * C)


def fuse_multiscale(low: Tensor, mid: Tensor, high: Tensor) -> Tensor:
    """缩放 low/mid 到 high 的空间尺寸，按 [low, mid, high] 顺序拼接通道"""
    for name, feature in (("low", low), ("mid", mid), ("high", high)):
        if feature.ndim != 4 or min(feature.shape) == 0:
            raise DimensionError(f"{name} 特征形状非法: {feature.shape}")
    height, width = high.shape[1], high.shape[2]
    low_resized = dc.resize_bilinear(low, height, width)
    mid_resized = dc.resize_bilinear(mid, height, width)
    return dc.concat([low_resized, mid_resized, high], axis=-1)


def patch_grid(height: int, width: int, k: int) -> Tuple[int, int]:
    """返回块大小 (Ceil(H/k), Ceil(W/k))"""
    if k < 1:
        raise ConfigError(f"k 必须 >= 1，实际 {k}")
    if k > min(height, width):
        raise ConfigError(f"k={k} 超过空间尺寸 {height}x{width}")
    return math.ceil(height / k), math.ceil(width / k)


def patch_bounds(height: int, width: int, k: int) -> Tuple[List[Tuple[int, int]], List[Tuple[int, int]]]:
    """
    每个块覆盖的真实行/列区间 [start, stop)，已裁剪到特征尺寸

    Ceil 规则下末尾的块可能完全落在补零区，此时 start == stop
    """
    patch_h, patch_w = patch_grid(height, width, k)
    rows = [(min(r * patch_h, height), min((r + 1) * patch_h, height)) for r in range(k)]
    cols = [(min(c * patch_w, width), min((c + 1) * patch_w, width)) for c in range(k)]
    return rows, cols


def patch_validity(height: int, width: int, k: int) -> np.ndarray:
    """行优先的 k*k 布尔数组：块内至少有一个真实位置"""
    rows, cols = patch_bounds(height, width, k)
    return np.array([r1 > r0 and c1 > c0 for r0, r1 in rows for c0, c1 in cols])


def partition(feature: Tensor, k: int = DEFAULT_K) -> PatchSet:
    """
    按行优先把 (N, H, W, C) 特征切成 k*k 个块并展平

    块 (r, c) 覆盖行 [r*h, min((r+1)*h, H))，列同理；越界部分补 0 后展平为 h*w*C 维向量
    """
    if feature.ndim != 4:
        raise DimensionError(f"partition 需要 NHWC 特征，实际 {feature.shape}")
    n, height, width, channels = feature.shape
    patch_h, patch_w = patch_grid(height, width, k)
    padded = dc.pad(feature, ((0, 0), (0, k * patch_h - height), (0, k * patch_w - width), (0, 0)))
    blocks = dc.reshape(padded, (n, k, patch_h, k, patch_w, channels))
    blocks = dc.transpose(blocks, (0, 1, 3, 2, 4, 5))
    vectors = dc.reshape(blocks, (n, k * k, patch_h * patch_w * channels))
    return PatchSet(k=k, patch_h=patch_h, patch_w=patch_w, vectors=vectors)


def similarity_pattern(patches, eps: float = dc.NORM_EPS) -> Tensor:
    """
    s_ij = (<u_i/|u_i|, u_j/|u_j|> + 1) / 2

    Args:
        patches: PatchSet 或 (N, P, D) / (P, D) 的 Tensor

    Returns:
        (N, P, P) 或 (P, P)，严格对称，取值 [0, 1]
    """
    vectors = patches.vectors if isinstance(patches, PatchSet) else dc.as_tensor(patches)
    single = vectors.ndim == 2
    if single:
        vectors = dc.reshape(vectors, (1,) + vectors.shape)
    if vectors.ndim != 3:
        raise DimensionError(f"块向量应为 (N, P, D)，实际 {vectors.shape}")

    # 0 向量的单位化结果为 0，对应相似度 0.5
    squared = dc.tsum(dc.mul(vectors, vectors), axis=-1, keepdims=True)
    unit = dc.div(vectors, dc.sqrt(dc.add(squared, eps * eps)))
    gram = dc.matmul(unit, dc.transpose(unit, (0, 2, 1)))
    symmetric = dc.mul(dc.add(gram, dc.transpose(gram, (0, 2, 1))), 0.5)
    s_hat = dc.clip(dc.mul(dc.add(symmetric, 1.0), 0.5), 0.0, 1.0)

    if single:
        s_hat = dc.reshape(s_hat, s_hat.shape[1:])
    return s_hat


def mpsm(low: Tensor, mid: Tensor, high: Tensor, k: int = DEFAULT_K) -> Tuple[Tensor, Tensor]:
    """完整的 MPSM：返回 (s_hat, 多尺度特征)"""
    multiscale = fuse_multiscale(low, mid, high)
    return similarity_pattern(partition(multiscale, k)), multiscale


def similarity_heatmap(s_hat: np.ndarray) -> np.ndarray:
    """k^2 x k^2 灰度热力图，像素值 255 * s"""
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_hat.ndim != 2 or s_hat.shape[0] != s_hat.shape[1]:
        raise DimensionError(f"相似度矩阵应为方阵，实际 {s_hat.shape}")
    return np.clip(np.rint(s_hat * 255.0), 0, 255).astype(np.uint8)


def save_similarity_heatmap(path: str, s_hat: np.ndarray):
    save_image(path, similarity_heatmap(s_hat) / 255.0)
    logger.info(f"相似度热力图已保存: {path}")


def save_similarity_csv(path: str, s_hat: np.ndarray):
    s_hat = np.asarray(s_hat, dtype=np.float64)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pd.DataFrame(s_hat).to_csv(path, index=False, header=False, float_format="%.10f")
    logger.info(f"相似度矩阵已保存: {path}")
