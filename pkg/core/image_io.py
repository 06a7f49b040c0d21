#!/usr/bin/env python3
"""
图像读写：8 位灰度/RGB 的 PNG 与二进制 PGM/PPM
读入时除以 255，保存时截断到 [0,255] 并四舍五入。
"""

import logging
import os

import numpy as np
from PIL import Image

from core.errors import DimensionError

logger = logging.getLogger(__name__)

SUPPORTED_EXTENSIONS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM"}


def _format_for(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext not in SUPPORTED_EXTENSIONS:
        raise ValueError(f"不支持的图像格式: {ext}")
    return SUPPORTED_EXTENSIONS[ext]


def load_image(path: str) -> np.ndarray:
    """读取图像，返回 HxW（灰度）或 HxWx3（RGB）的 [0,1] float64 数组"""
    _format_for(path)
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        data = np.asarray(img, dtype=np.float64) / 255.0
    return data


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(data, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path: str, data: np.ndarray):
    """保存 [0,1] 图像；HxW 或 HxWx1 保存为灰度，HxWx3 保存为 RGB"""
    fmt = _format_for(path)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    if data.ndim == 3 and data.shape[2] != 3:
        raise DimensionError(f"只支持 1 或 3 通道，实际 {data.shape}")
    if data.ndim == 3 and fmt == "PPM" and path.lower().endswith(".pgm"):
        raise DimensionError("PGM 只能保存单通道图像")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(to_uint8(data)).save(path, format=fmt)


def save_mask(path: str, mask: np.ndarray):
    """二值掩码保存为 0/255 的 PGM"""
    save_image(path, (np.asarray(mask) > 0.5).astype(np.float64))


def load_mask(path: str) -> np.ndarray:
    data = load_image(path)
    if data.ndim != 2:
        raise DimensionError(f"掩码应为单通道，实际 {data.shape}")
    return (data >= 0.5).astype(np.float64)
