#!/usr/bin/env python3
"""
训练配置
配置文件按分组保存（frequency / mpsm / supervision / loss / optimizer / training / data / model），
读取后展平为 TrainConfig，并由 pydantic 做范围校验。
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from core.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "config/train_config.json"
SEED_ENV_VAR = "FORGERY_DETECTOR_SEED"
VARIANT_NAMES = ("full", "rgb_baseline", "concat", "rfam", "rgb_mpsm")

# 配置文件分组 -> 字段
SECTIONS = {
    "frequency": ["alpha"],
    "mpsm": ["k"],
    "supervision": ["mask_threshold"],
    "loss": ["lambda1", "lambda2", "seg_loss_normalize"],
    "optimizer": ["lr", "beta1", "beta2", "weight_decay", "eps", "lr_halving_period"],
    "training": ["batch_size", "epochs", "seed", "val_fraction", "cache_frequency_cue",
                 "eval_workers", "max_corrupt_fraction"],
    "data": ["image_size", "corpus_size"],
    "model": ["variant", "widths"],
}


class TrainConfig(BaseModel):
    """全部超参数，默认值即发布的默认配置"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(0.33, ge=0.0, le=1.0)
    k: int = Field(5, ge=1)
    mask_threshold: float = Field(0.15, gt=0.0, lt=1.0)
    lambda1: float = Field(10.0, ge=0.0)
    lambda2: float = Field(1.0, ge=0.0)
    seg_loss_normalize: bool = True
    lr: float = Field(2e-4, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    eps: float = Field(1e-8, gt=0.0)
    lr_halving_period: int = Field(10, gt=0)
    batch_size: int = Field(16, gt=0)
    epochs: int = Field(20, gt=0)
    seed: int = Field(42, ge=0)
    val_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    cache_frequency_cue: bool = False
    eval_workers: int = Field(4, gt=0)
    max_corrupt_fraction: float = Field(0.05, ge=0.0, le=1.0)
    image_size: int = Field(64, ge=32)
    corpus_size: int = Field(2000, gt=1)
    variant: str = "full"
    widths: List[int] = Field(default_factory=lambda: [16, 32, 64])

    @field_validator("variant")
    @classmethod
    def _check_variant(cls, value: str) -> str:
        if value not in VARIANT_NAMES:
            raise ValueError(f"variant 必须是 {VARIANT_NAMES} 之一")
        return value

    @field_validator("widths")
    @classmethod
    def _check_widths(cls, value: List[int]) -> List[int]:
        if len(value) != 3 or any(w <= 0 for w in value):
            raise ValueError("widths 需要 3 个正整数")
        return value

    def to_sections(self) -> Dict[str, Dict[str, Any]]:
        """转换为分组形式，用于写回配置文件"""
        flat = self.model_dump()
        return {section: {key: flat[key] for key in keys} for section, keys in SECTIONS.items()}

    def with_overrides(self, **overrides) -> "TrainConfig":
        return build_config({**self.model_dump(), **{k: v for k, v in overrides.items() if v is not None}})


def build_config(values: Dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}")


def _flatten_sections(config_data: Dict[str, Any]) -> Dict[str, Any]:
    flat = {}
    for section, values in config_data.items():
        if section not in SECTIONS:
            raise ConfigError(f"未知的配置分组: {section}")
        if not isinstance(values, dict):
            raise ConfigError(f"配置分组 {section} 应为对象")
        for key, value in values.items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"配置项 {section}.{key} 不属于该分组")
            flat[key] = value
    return flat


def load_config_from_file(config_file: str = DEFAULT_CONFIG_FILE) -> Optional[Dict]:
    """读取分组 JSON；文件不存在返回 None"""
    try:
        with open(config_file, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        return None
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件格式错误 {config_file}: {e}")


def load_train_config(config_file: str = DEFAULT_CONFIG_FILE, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """
    加载训练配置：默认值 <- 配置文件 <- 环境变量种子 <- 命令行覆盖

    Raises:
        ConfigError: 文件格式错误或取值越界
    """
    config_data = load_config_from_file(config_file)
    if config_data is None:
        logger.warning(f"配置文件 {config_file} 不存在，使用默认配置")
        values = {}
    else:
        values = _flatten_sections(config_data)

    env_seed = os.getenv(SEED_ENV_VAR)
    if env_seed:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"环境变量 {SEED_ENV_VAR} 不是整数: {env_seed}")

    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(values)


def save_train_config(config: TrainConfig, config_file: str = DEFAULT_CONFIG_FILE):
    """保存为分组 JSON"""
    directory = os.path.dirname(config_file)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(config_file, "w", encoding="utf-8") as f:
        json.dump(config.to_sections(), f, indent=2, ensure_ascii=False)
    logger.info(f"配置已保存到: {config_file}")


if __name__ == "__main__":
    print("伪造检测训练配置")
    print("=" * 40)
    for key, value in load_train_config().model_dump().items():
        print(f"  {key}: {value}")
