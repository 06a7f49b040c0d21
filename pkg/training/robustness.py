#!/usr/bin/env python3
"""
鲁棒性扰动
评估前对 RGB 输入施加扰动，之后再计算频率线索：
    noise  高斯噪声，strength = 标准差
    blur   高斯模糊，strength = sigma（像素）
    jpeg   JPEG 压缩，strength = 质量 1..95
    patch  随机遮挡块，strength = 块边长占图像边长的比例
所有随机性来自传入的种子
"""

import io
import logging

import numpy as np
from PIL import Image
from scipy import ndimage

from core.errors import ConfigError, DimensionError
from core.image_io import to_uint8

logger = logging.getLogger(__name__)

PERTURBATIONS = ("none", "noise", "blur", "jpeg", "patch")


def gaussian_noise(images: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    if std < 0:
        raise ConfigError(f"噪声标准差不能为负: {std}")
    if std == 0:
        return images.copy()
    return np.clip(images + rng.normal(0.0, std, images.shape), 0.0, 1.0)


def gaussian_blur(images: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ConfigError(f"模糊 sigma 不能为负: {sigma}")
    if sigma == 0:
        return images.copy()
    # 只在空间维度上模糊
    return ndimage.gaussian_filter(images, sigma=(0, sigma, sigma, 0), mode="reflect")


def jpeg_compress(images: np.ndarray, quality: float) -> np.ndarray:
    quality = int(quality)
    if not 1 <= quality <= 95:
        raise ConfigError(f"JPEG 质量应在 [1, 95]，实际 {quality}")
    out = np.empty_like(images)
    for i, image in enumerate(images):
        buffer = io.BytesIO()
        Image.fromarray(to_uint8(image)).save(buffer, format="JPEG", quality=quality)
        buffer.seek(0)
        with Image.open(buffer) as decoded:
            out[i] = np.asarray(decoded.convert("RGB"), dtype=np.float64) / 255.0
    return out


def random_patch(images: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """每张图随机位置放一个纯色方块"""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"遮挡块比例应在 (0, 1]，实际 {fraction}")
    n, height, width, _ = images.shape
    side = max(1, int(round(fraction * min(height, width))))
    out = images.copy()
    for i in range(n):
        top = int(rng.integers(0, height - side + 1))
        left = int(rng.integers(0, width - side + 1))
        out[i, top:top + side, left:left + side, :] = rng.random(3)
    return out


def perturb(images: np.ndarray, kind: str = "none", strength: float = 0.0, seed: int = 0) -> np.ndarray:
    """
    对 (N, H, W, 3) 批量图像施加一种扰动

    Raises:
        ConfigError: 未知扰动或强度越界
        DimensionError: 输入不是 NHWC RGB
    """
    if kind not in PERTURBATIONS:
        raise ConfigError(f"未知的扰动: {kind}，可选 {PERTURBATIONS}")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise DimensionError(f"perturb 需要 (N, H, W, 3)，实际 {images.shape}")
    if kind == "none":
        return images

    logger.debug(f"施加扰动 {kind} strength={strength}")
    rng = np.random.default_rng(seed)
    if kind == "noise":
        return gaussian_noise(images, strength, rng)
    if kind == "blur":
        return gaussian_blur(images, strength)
    if kind == "jpeg":
        return jpeg_compress(images, strength)
    return random_patch(images, strength, rng)
