#!/usr/bin/env python3
"""
二阶监督
源图与伪造图的差异 -> 二值掩码 M -> 每块伪造概率 p -> 目标相似度 s_ij = 1 - (p_i - p_j)^2
"""

import logging
from typing import Optional, Tuple

import numpy as np

from core.errors import DimensionError
from core.frequency_cue import LUMA_WEIGHTS
from network.mpsm import patch_bounds

logger = logging.getLogger(__name__)

DEFAULT_MASK_THRESHOLD = 0.15


def build_mask(source: np.ndarray, forged: np.ndarray, threshold: float = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """
    逐通道绝对差 -> 亮度灰度 -> 阈值二值化

    图像读入时已除以 255，因此直接与阈值比较
    """
    source = np.asarray(source, dtype=np.float64)
    forged = np.asarray(forged, dtype=np.float64)
    if source.shape != forged.shape:
        raise DimensionError(f"源图与伪造图尺寸不一致: {source.shape} vs {forged.shape}")
    if source.ndim != 3 or source.shape[2] != 3:
        raise DimensionError(f"build_mask 需要 3 通道图像，实际 {source.shape}")
    gray = np.abs(forged - source) @ LUMA_WEIGHTS
    return (gray > threshold).astype(np.float64)


def patch_probabilities(mask: np.ndarray, k: int, feature_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    每块的伪造概率：块内真实像素的均值（不计补零部分），行优先排列

    Args:
        mask: HxW 二值掩码
        k: 块网格边长
        feature_size: 特征图尺寸 (H~, W~)。给定时按特征块的 Ceil 划分切块，
            每个块取其在掩码上对应的像素区域，保证与 partition 的块一一对应；
            为 None 时直接在掩码分辨率上划分

    Returns:
        长度 k*k 的数组；完全落在补零区的块为 0
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise DimensionError(f"掩码应为 HxW，实际 {mask.shape}")
    height, width = mask.shape
    grid_h, grid_w = feature_size if feature_size is not None else (height, width)
    if grid_h > height or grid_w > width:
        raise DimensionError(f"特征尺寸 {grid_h}x{grid_w} 大于掩码 {height}x{width}")
    rows, cols = patch_bounds(grid_h, grid_w, k)

    probs = np.zeros(k * k, dtype=np.float64)
    for r, (r0, r1) in enumerate(rows):
        y0, y1 = r0 * height // grid_h, r1 * height // grid_h
        for c, (c0, c1) in enumerate(cols):
            x0, x1 = c0 * width // grid_w, c1 * width // grid_w
            block = mask[y0:y1, x0:x1]
            if block.size:
                probs[r * k + c] = block.mean()
    return probs


def target_similarity(p: np.ndarray) -> np.ndarray:
    """s_ij = 1 - (p_i - p_j)^2"""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    diff = p[:, np.newaxis] - p[np.newaxis, :]
    return 1.0 - diff ** 2


def batch_targets(masks: np.ndarray, k: int, feature_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """(N, H, W) 掩码 -> (N, k*k, k*k) 目标相似度"""
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim != 3:
        raise DimensionError(f"batch_targets 需要 (N, H, W)，实际 {masks.shape}")
    return np.stack([target_similarity(patch_probabilities(m, k, feature_size)) for m in masks])
