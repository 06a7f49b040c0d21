#!/usr/bin/env python3
"""
合成伪造人脸数据集生成器
真实样本：渐变背景 + 带限噪声 + 椭圆人脸布局（脸、眼睛、嘴）
伪造样本：从另一张纹理中取椭圆区域，经过 2x 下采样再最近邻上采样（引入频域伪影），
         色调偏移后羽化贴回；掩码由 build_mask(source, forged, 0.15) 得到

目录结构:
    <corpus>/images/*.png    输入图像
    <corpus>/sources/*.png   伪造样本对应的源图
    <corpus>/masks/*.pgm     0/255 掩码
    <corpus>/manifest.csv    path,label,seed,mask_path,source_path
    <corpus>/reports/        生成报告
"""

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from core.errors import ConfigError, CorpusError
from core.image_io import load_image, load_mask, save_image, save_mask
from training.supervision import DEFAULT_MASK_THRESHOLD, build_mask

logger = logging.getLogger(__name__)

MIN_SIZE = 32
MIN_FORGED_FRACTION = 0.04
MAX_FORGED_FRACTION = 0.40
MAX_PASTE_ATTEMPTS = 32
MANIFEST_NAME = "manifest.csv"


@dataclass
class SyntheticSample:
    image: np.ndarray   # (H, W, 3)
    mask: np.ndarray    # (H, W)
    label: int
    seed: int


@dataclass
class Corpus:
    """内存中的数据集"""
    images: np.ndarray          # (N, H, W, 3)
    masks: np.ndarray           # (N, H, W)
    labels: np.ndarray          # (N,)
    seeds: np.ndarray           # (N,)
    paths: List[str]

    def __len__(self):
        return int(self.labels.size)

    def subset(self, indices: np.ndarray) -> "Corpus":
        return Corpus(self.images[indices], self.masks[indices], self.labels[indices], self.seeds[indices],
                      [self.paths[i] for i in indices])


def _check_size(size: int):
    if size < MIN_SIZE:
        raise ConfigError(f"图像尺寸至少为 {MIN_SIZE}，实际 {size}")


def sample_seed(corpus_seed: int, index: int) -> int:
    """由数据集种子和样本序号派生样本种子"""
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1)[0])


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float, channels: int = 3) -> np.ndarray:
    """单位标准差的带限噪声"""
    noise = rng.standard_normal((size, size, channels))
    smooth = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="reflect")
    return smooth / (smooth.std() + 1e-12)


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return ((((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0).astype(np.float64)


def _soft(region: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    return ndimage.gaussian_filter(region, sigma=sigma)


def _render_face(rng: np.random.Generator, size: int) -> np.ndarray:
    """渐变背景 + 人脸椭圆 + 五官"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    base = rng.uniform(0.2, 0.6, 3)
    slope_y, slope_x = rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.2, 0.2, 3)
    image = base + slope_y * yy[..., None] + slope_x * xx[..., None]
    image = image + 0.04 * _smooth_noise(rng, size, sigma=size / 16)

    cy = size * rng.uniform(0.45, 0.55)
    cx = size * rng.uniform(0.45, 0.55)
    ry, rx = size * rng.uniform(0.34, 0.42), size * rng.uniform(0.26, 0.34)
    skin = np.array([rng.uniform(0.55, 0.85), rng.uniform(0.40, 0.65), rng.uniform(0.30, 0.55)])
    face = _soft(_ellipse(size, cy, cx, ry, rx))[..., None]
    skin_layer = skin + 0.03 * _smooth_noise(rng, size, sigma=2.5)
    image = face * skin_layer + (1.0 - face) * image

    eye_dy, eye_dx = ry * 0.25, rx * 0.42
    eye_r = size * rng.uniform(0.035, 0.05)
    for side in (-1.0, 1.0):
        eye = _soft(_ellipse(size, cy - eye_dy, cx + side * eye_dx, eye_r * 0.7, eye_r))[..., None]
        image = eye * (skin * 0.35) + (1.0 - eye) * image
    mouth = _soft(_ellipse(size, cy + ry * 0.45, cx, size * 0.025, rx * 0.45))[..., None]
    image = mouth * (skin * np.array([0.8, 0.4, 0.4])) + (1.0 - mouth) * image
    return np.clip(image, 0.0, 1.0)


def generate_real(seed: int, size: int = 64) -> SyntheticSample:
    """真实样本，标签 0，掩码全 0；由 seed 完全确定"""
    _check_size(size)
    rng = np.random.default_rng(seed)
    image = _render_face(rng, size)
    return SyntheticSample(image=image, mask=np.zeros((size, size)), label=0, seed=seed)


def _resample_artifact(texture: np.ndarray) -> np.ndarray:
    """2x 块平均下采样，再最近邻上采样回原尺寸"""
    size = texture.shape[0]
    half = size // 2
    down = texture[:2 * half, :2 * half].reshape(half, 2, half, 2, 3).mean(axis=(1, 3))
    up = np.repeat(np.repeat(down, 2, axis=0), 2, axis=1)
    if up.shape[0] < size:
        up = np.pad(up, ((0, size - up.shape[0]), (0, size - up.shape[1]), (0, 0)), mode="edge")
    return up


def generate_forged(seed: int, size: int = 64,
                    threshold: float = DEFAULT_MASK_THRESHOLD) -> Tuple[SyntheticSample, SyntheticSample]:
    """
    生成 (源样本, 伪造样本)；伪造区域占比保证在 [4%, 40%]

    Raises:
        CorpusError: 多次尝试仍无法满足占比约束
    """
    _check_size(size)
    rng = np.random.default_rng(seed)
    source_seed = int(rng.integers(0, 2 ** 31 - 1))
    source = generate_real(source_seed, size)

    for _ in range(MAX_PASTE_ATTEMPTS):
        donor = _render_face(rng, size) + 0.08 * _smooth_noise(rng, size, sigma=0.6)
        cy = size * rng.uniform(0.35, 0.65)
        cx = size * rng.uniform(0.35, 0.65)
        ry, rx = size * rng.uniform(0.15, 0.28), size * rng.uniform(0.15, 0.28)
        region = _ellipse(size, cy, cx, ry, rx)
        if region.sum() == 0:
            continue

        # 色调偏移，保证与源图的差异明显
        src_mean = (source.image * region[..., None]).sum(axis=(0, 1)) / region.sum()
        donor_mean = (donor * region[..., None]).sum(axis=(0, 1)) / region.sum()
        tone = np.where(src_mean < 0.5, src_mean + 0.35, src_mean - 0.35)
        donor = np.clip(donor - donor_mean + tone, 0.0, 1.0)
        donor = _resample_artifact(donor)

        weight = _soft(region, sigma=1.5)[..., None]
        forged_image = np.clip(weight * donor + (1.0 - weight) * source.image, 0.0, 1.0)
        mask = build_mask(source.image, forged_image, threshold)
        fraction = mask.mean()
        if MIN_FORGED_FRACTION <= fraction <= MAX_FORGED_FRACTION:
            forged = SyntheticSample(image=forged_image, mask=mask, label=1, seed=seed)
            return source, forged
        logger.debug(f"种子 {seed} 伪造占比 {fraction:.3f} 超出范围，重新生成")

    raise CorpusError(f"种子 {seed} 在 {MAX_PASTE_ATTEMPTS} 次尝试内未生成合格的伪造样本")


def generate_sample(corpus_seed: int, index: int, size: int) -> Tuple[SyntheticSample, Optional[SyntheticSample]]:
    """偶数序号为真实样本，奇数序号为伪造样本；返回 (样本, 源样本或 None)"""
    seed = sample_seed(corpus_seed, index)
    if index % 2 == 0:
        return generate_real(seed, size), None
    source, forged = generate_forged(seed, size)
    return forged, source


def generate_in_memory(count: int, size: int = 64, seed: int = 42, workers: int = 4) -> Corpus:
    """不落盘直接生成数据集，真实 ceil(N/2) 个，伪造 floor(N/2) 个"""
    if count < 1:
        raise ConfigError(f"样本数必须 >= 1，实际 {count}")
    _check_size(size)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda i: generate_sample(seed, i, size)[0], range(count)))
    return Corpus(
        images=np.stack([s.image for s in results]),
        masks=np.stack([s.mask for s in results]),
        labels=np.array([s.label for s in results], dtype=np.int64),
        seeds=np.array([s.seed for s in results], dtype=np.int64),
        paths=[f"memory://{i}" for i in range(count)],
    )


class SyntheticCorpusGenerator:
    """把合成数据集写入目录"""

    def __init__(self, data_dir: str = "./data/corpus", size: int = 64, seed: int = 42, workers: int = 4):
        _check_size(size)
        self.data_dir = data_dir
        self.size = size
        self.seed = seed
        self.workers = workers
        self.ensure_directories()

    def ensure_directories(self):
        """确保目录结构存在"""
        for subdir in ["images", "sources", "masks", "reports"]:
            directory = os.path.join(self.data_dir, subdir)
            os.makedirs(directory, exist_ok=True)
            logger.debug(f"确保目录存在: {directory}")

    def _write_sample(self, index: int) -> Dict:
        sample, source = generate_sample(self.seed, index, self.size)
        name = f"{index:05d}"
        image_path = os.path.join("images", f"{name}.png")
        mask_path = os.path.join("masks", f"{name}.pgm")
        save_image(os.path.join(self.data_dir, image_path), sample.image)
        save_mask(os.path.join(self.data_dir, mask_path), sample.mask)
        source_path = ""
        if source is not None:
            source_path = os.path.join("sources", f"{name}.png")
            save_image(os.path.join(self.data_dir, source_path), source.image)
        return {
            "path": image_path,
            "label": sample.label,
            "seed": sample.seed,
            "mask_path": mask_path,
            "source_path": source_path,
        }

    def generate(self, count: int) -> Dict:
        """生成 count 个样本并写出清单与报告"""
        if count < 1:
            raise ConfigError(f"样本数必须 >= 1，实际 {count}")
        start_time = time.time()
        logger.info(f"开始生成合成数据集: {count} 个样本, 尺寸 {self.size}, 种子 {self.seed}")

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            rows = list(pool.map(self._write_sample, range(count)))

        manifest = pd.DataFrame(rows, columns=["path", "label", "seed", "mask_path", "source_path"])
        manifest_file = os.path.join(self.data_dir, MANIFEST_NAME)
        manifest.to_csv(manifest_file, index=False, encoding="utf-8")

        report = {
            "count": count,
            "real": int((manifest["label"] == 0).sum()),
            "forged": int((manifest["label"] == 1).sum()),
            "size": self.size,
            "seed": self.seed,
            "manifest": manifest_file,
            "duration_seconds": time.time() - start_time,
            "generated_at": datetime.now().isoformat(),
        }
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        report_file = os.path.join(self.data_dir, "reports", f"corpus_report_{timestamp}.json")
        with open(report_file, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, ensure_ascii=False)
        logger.info(f"数据集生成完成: 真实 {report['real']} / 伪造 {report['forged']}，清单 {manifest_file}")
        return report


def load_corpus(corpus_dir: str, image_size: Optional[int] = None, max_corrupt_fraction: float = 0.05) -> Corpus:
    """
    读取目录中的数据集；损坏样本跳过并告警，损坏比例超过 max_corrupt_fraction 时终止

    Raises:
        CorpusError: 清单缺失/非法或损坏样本过多
    """
    manifest_file = os.path.join(corpus_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_file):
        raise CorpusError(f"数据集清单不存在: {manifest_file}")
    try:
        manifest = pd.read_csv(manifest_file, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise CorpusError(f"数据集清单解析失败: {e}")
    required = {"path", "label", "seed", "mask_path"}
    if not required.issubset(manifest.columns):
        raise CorpusError(f"数据集清单缺少列: {sorted(required - set(manifest.columns))}")
    if manifest.empty:
        raise CorpusError("数据集清单为空")

    images, masks, labels, seeds, paths = [], [], [], [], []
    corrupt = 0
    for row in manifest.itertuples(index=False):
        try:
            image = load_image(os.path.join(corpus_dir, row.path))
            mask = load_mask(os.path.join(corpus_dir, row.mask_path))
            label = int(row.label)
            if image.ndim != 3 or image.shape[2] != 3:
                raise ValueError(f"图像不是 RGB: {image.shape}")
            if image_size is not None and image.shape[:2] != (image_size, image_size):
                raise ValueError(f"图像尺寸 {image.shape[:2]} 与配置 {image_size} 不一致")
            if mask.shape != image.shape[:2]:
                raise ValueError(f"掩码尺寸 {mask.shape} 与图像不一致")
            if images and image.shape != images[0].shape:
                raise ValueError(f"图像尺寸 {image.shape} 与数据集其他样本不一致")
            if label not in (0, 1):
                raise ValueError(f"标签非法: {label}")
        except Exception as e:
            corrupt += 1
            logger.warning(f"跳过损坏样本 {row.path}: {e}")
            continue
        images.append(image)
        masks.append(mask)
        labels.append(label)
        seeds.append(int(row.seed))
        paths.append(row.path)

    fraction = corrupt / len(manifest)
    if fraction > max_corrupt_fraction:
        raise CorpusError(f"损坏样本比例 {fraction:.1%} 超过上限 {max_corrupt_fraction:.0%}，终止")
    if not images:
        raise CorpusError("没有可用样本")
    logger.info(f"数据集加载完成: {len(images)} 个样本, 跳过 {corrupt} 个")
    return Corpus(np.stack(images), np.stack(masks), np.array(labels, dtype=np.int64),
                  np.array(seeds, dtype=np.int64), paths)
