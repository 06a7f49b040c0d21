#!/usr/bin/env python3
"""
频率感知线索
x2 = IDCT(F(DCT(gray(x1)), alpha))：正交 II 型二维 DCT，左上角三角形高通滤波，再做逆变换。
"""

import logging

import numpy as np
from scipy import fft

from core.errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

# 标准亮度权重
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
MIN_SIDE = 8


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise DimensionError(f"图像应为 HxW 或 HxWxC，实际 {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise DimensionError(f"图像尺寸至少 {MIN_SIDE}x{MIN_SIDE}，实际 {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise DimensionError("图像包含非有限值")
    return img


def to_luminance(img: np.ndarray) -> np.ndarray:
    """RGB -> 单通道亮度 0.299R + 0.587G + 0.114B"""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"to_luminance 需要 3 通道图像，实际 {img.shape}")
    return img @ LUMA_WEIGHTS


def dct2d(img: np.ndarray) -> np.ndarray:
    """正交 II 型二维 DCT，(0,0) 为直流分量"""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"dct2d 需要单通道图像，实际 {img.shape}")
    return fft.dctn(img, type=2, norm="ortho")


def idct2d(coeffs: np.ndarray) -> np.ndarray:
    """dct2d 的精确逆变换（正交 III 型）"""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2:
        raise DimensionError(f"idct2d 需要二维系数，实际 {coeffs.shape}")
    return fft.idctn(coeffs, type=2, norm="ortho")


def validate_alpha(alpha: float) -> float:
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha 必须在 [0, 1] 内，实际 {alpha}")
    return float(alpha)


def lowfreq_triangle(height: int, width: int, alpha: float) -> np.ndarray:
    """被置零的左上角三角形：i + j < round(alpha * max(H, W))"""
    alpha = validate_alpha(alpha)
    side = int(round(alpha * max(height, width)))
    rows, cols = np.indices((height, width))
    return (rows + cols) < side


def highpass_filter(coeffs: np.ndarray, alpha: float) -> np.ndarray:
    """把低频三角形内的 DCT 系数置零，其余不变"""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2:
        raise DimensionError(f"highpass_filter 需要二维系数，实际 {coeffs.shape}")
    zeroed = lowfreq_triangle(coeffs.shape[0], coeffs.shape[1], alpha)
    return np.where(zeroed, 0.0, coeffs)


def frequency_cue(img: np.ndarray, alpha: float = 0.33) -> np.ndarray:
    """
    计算频率线索 x2

    Args:
        img: HxW 或 HxWx3 的 [0,1] 图像
        alpha: 低频三角形边长比例

    Returns:
        HxW 单通道残差，不做截断（保留符号信息）
    """
    img = _check_image(img)
    validate_alpha(alpha)
    if img.ndim == 3:
        if img.shape[2] == 1:
            gray = img[:, :, 0]
        else:
            gray = to_luminance(img)
    else:
        gray = img
    return idct2d(highpass_filter(dct2d(gray), alpha))


def batch_frequency_cue(images: np.ndarray, alpha: float = 0.33) -> np.ndarray:
    """(N, H, W, 3) -> (N, H, W, 1)"""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise DimensionError(f"batch_frequency_cue 需要 NHWC 输入，实际 {images.shape}")
    cues = np.stack([frequency_cue(img, alpha) for img in images])
    return cues[..., np.newaxis]
