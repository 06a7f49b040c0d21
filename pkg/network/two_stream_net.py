#!/usr/bin/env python3
"""
桌面规模的双流网络
RGB 流输入 x1，频率流输入 x2；三个阶段后各接一个 RFAM，
MPSM 基于三层融合特征生成相似度模式并分类，解码器输出伪造区域掩码。

variant 用于消融：
    full          RGB + 频率 + RFAM + MPSM
    rgb_baseline  仅 RGB，全局池化分类
    concat        RGB + 频率，各层直接拼接，全局池化分类
    rfam          RGB + 频率 + RFAM，全局池化分类
    rgb_mpsm      仅 RGB + MPSM
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from core import diffcore as dc
from core.checkpoint import load_checkpoint, save_checkpoint
from core.diffcore import Tensor
from core.errors import CheckpointError, ConfigError, DimensionError
from network.layers import BatchNorm2d, Conv2d, Dense, ParameterStore
from network.mpsm import mpsm, patch_validity
from network.rfam import RFAM, STAGE_NAMES, StageFeatures

logger = logging.getLogger(__name__)

VARIANTS = {
    # variant: (频率流, RFAM, MPSM)
    "full": (True, True, True),
    "rgb_baseline": (False, False, False),
    "concat": (True, False, False),
    "rfam": (True, True, False),
    "rgb_mpsm": (False, False, True),
}

DEFAULT_WIDTHS = (16, 32, 64)
HEAD_HIDDEN = 64
DECODER_TOP = 8


@dataclass
class NetworkOutput:
    y_hat: Tensor                      # (N,)
    mask_hat: Tensor                   # (N, H, W)
    s_hat: Optional[Tensor]            # (N, k^2, k^2)，无 MPSM 时为 None
    stage_fused: Dict[str, Tensor] = field(default_factory=dict)
    attention: Dict[str, Sequence[Tensor]] = field(default_factory=dict)


class StreamEncoder:
    """三阶段 [conv3x3-BN-ReLU-conv3x3-BN-ReLU-2x 下采样]，输出 low/mid/high"""

    def __init__(self, name: str, in_channels: int, widths: Sequence[int], rng: np.random.Generator,
                 store: ParameterStore):
        self.stages = []
        previous = in_channels
        for stage_name, width in zip(STAGE_NAMES, widths):
            prefix = f"{name}.{stage_name}"
            self.stages.append((
                store.register(Conv2d(f"{prefix}.conv_a", previous, width, 3, rng)),
                store.register(BatchNorm2d(f"{prefix}.bn_a", width)),
                store.register(Conv2d(f"{prefix}.conv_b", width, width, 3, rng)),
                store.register(BatchNorm2d(f"{prefix}.bn_b", width)),
            ))
            previous = width

    def __call__(self, x: Tensor, training: bool) -> Dict[str, Tensor]:
        features = {}
        for stage_name, (conv_a, bn_a, conv_b, bn_b) in zip(STAGE_NAMES, self.stages):
            x = dc.relu(bn_a(conv_a(x), training))
            x = dc.relu(bn_b(conv_b(x), training))
            x = dc.avg_pool2x2(x)
            features[stage_name] = x
        return features


class TwoStreamNet:
    """双流伪造检测网络"""

    def __init__(self, variant: str = "full", widths: Sequence[int] = DEFAULT_WIDTHS, k: int = 5,
                 image_size: int = 64, seed: int = 42):
        if variant not in VARIANTS:
            raise ConfigError(f"未知的网络变体: {variant}，可选 {sorted(VARIANTS)}")
        if len(widths) != 3 or any(w <= 0 for w in widths):
            raise ConfigError(f"widths 需要 3 个正整数，实际 {widths}")
        self.variant = variant
        self.widths = tuple(int(w) for w in widths)
        self.k = int(k)
        self.image_size = int(image_size)
        self.seed = int(seed)
        self.use_frequency, self.use_rfam, self.use_mpsm = VARIANTS[variant]
        self.checkpoint_header: Optional[Dict] = None
        # high 层尺寸为 image_size / 8
        self.feature_size = self.image_size // 8
        self.patch_valid: Optional[np.ndarray] = None
        if self.use_mpsm:
            self.patch_valid = patch_validity(self.feature_size, self.feature_size, self.k)

        rng = np.random.default_rng(self.seed)
        self.store = ParameterStore()
        self.rgb_stream = StreamEncoder("rgb", 3, self.widths, rng, self.store)
        self.freq_stream = StreamEncoder("freq", 1, self.widths, rng, self.store) if self.use_frequency else None
        self.rfams = {}
        if self.use_rfam:
            for stage_name, width in zip(STAGE_NAMES, self.widths):
                self.rfams[stage_name] = RFAM(f"rfam.{stage_name}", width, rng, self.store)

        fused = [w * 2 if (self.use_frequency and not self.use_rfam) else w for w in self.widths]
        self.fused_widths = tuple(fused)

        head_in = self.k ** 4 if self.use_mpsm else fused[2]
        self.head_hidden = self.store.register(Dense("head.fc1", head_in, HEAD_HIDDEN, rng))
        self.head_out = self.store.register(Dense("head.fc2", HEAD_HIDDEN, 1, rng))

        # 解码器：三次双线性上采样 + 卷积，跳连对应层的融合特征
        w_low, w_mid = self.widths[0], self.widths[1]
        self.dec_mid_conv = self.store.register(Conv2d("decoder.mid.conv", fused[2] + fused[1], w_mid, 3, rng))
        self.dec_mid_bn = self.store.register(BatchNorm2d("decoder.mid.bn", w_mid))
        self.dec_low_conv = self.store.register(Conv2d("decoder.low.conv", w_mid + fused[0], w_low, 3, rng))
        self.dec_low_bn = self.store.register(BatchNorm2d("decoder.low.bn", w_low))
        self.dec_top_conv = self.store.register(Conv2d("decoder.top.conv", w_low, DECODER_TOP, 3, rng))
        self.dec_out_conv = self.store.register(Conv2d("decoder.out.conv1x1", DECODER_TOP, 1, 1, rng))

        logger.debug(f"网络构建完成: variant={variant}, 参数量={self.store.parameter_count()}")

    # ------------------------------------------------------------------
    def architecture(self) -> Dict:
        """写入检查点头部，用于加载时校验"""
        return {
            "variant": self.variant,
            "widths": list(self.widths),
            "k": self.k,
            "image_size": self.image_size,
            "head_hidden": HEAD_HIDDEN,
            "decoder_top": DECODER_TOP,
        }

    def named_parameters(self) -> Dict[str, Tensor]:
        return self.store.named_parameters()

    def parameters(self):
        return list(self.store.named_parameters().values())

    def zero_grad(self):
        self.store.zero_grad()

    # ------------------------------------------------------------------
    def _check_inputs(self, x1: Tensor, x2: Optional[Tensor]):
        if x1.ndim != 4 or x1.shape[-1] != 3:
            raise DimensionError(f"x1 应为 (N, H, W, 3)，实际 {x1.shape}")
        if self.use_frequency:
            if x2 is None:
                raise DimensionError(f"变体 {self.variant} 需要频率线索 x2")
            if x2.ndim != 4 or x2.shape[-1] != 1 or x2.shape[:3] != x1.shape[:3]:
                raise DimensionError(f"x2 应为 (N, H, W, 1) 且与 x1 同尺寸，实际 {x2.shape} vs {x1.shape}")

    def _fuse_stage(self, stage_name: str, rgb: Tensor, freq: Optional[Tensor], training: bool, verify: bool):
        if self.use_rfam:
            output = self.rfams[stage_name](StageFeatures(stage_name, freq, rgb), training, verify=verify)
            return output.fused, (output.a1, output.a2)
        if self.use_frequency:
            return dc.concat([freq, rgb], axis=-1), ()
        return rgb, ()

    def _decode(self, fused: Dict[str, Tensor], out_h: int, out_w: int, training: bool) -> Tensor:
        low, mid, high = fused["low"], fused["mid"], fused["high"]
        d = dc.resize_bilinear(high, mid.shape[1], mid.shape[2])
        d = dc.relu(self.dec_mid_bn(self.dec_mid_conv(dc.concat([d, mid], axis=-1)), training))
        d = dc.resize_bilinear(d, low.shape[1], low.shape[2])
        d = dc.relu(self.dec_low_bn(self.dec_low_conv(dc.concat([d, low], axis=-1)), training))
        d = dc.resize_bilinear(d, out_h, out_w)
        d = dc.relu(self.dec_top_conv(d))
        logits = self.dec_out_conv(d)
        return dc.reshape(dc.sigmoid(logits), logits.shape[:3])

    def forward(self, x1, x2=None, mode: str = "eval", verify: bool = False) -> NetworkOutput:
        """
        前向计算

        Args:
            x1: (N, H, W, 3) RGB 输入
            x2: (N, H, W, 1) 频率线索，仅 RGB 变体可为 None
            mode: train / eval，只影响批归一化统计
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode 只能是 train 或 eval，实际 {mode}")
        training = mode == "train"
        x1 = dc.as_tensor(x1)
        x2 = dc.as_tensor(x2) if x2 is not None else None
        self._check_inputs(x1, x2)

        rgb_features = self.rgb_stream(x1, training)
        freq_features = self.freq_stream(x2, training) if self.use_frequency else {}

        stage_fused, attention = {}, {}
        for stage_name in STAGE_NAMES:
            fused, maps = self._fuse_stage(stage_name, rgb_features[stage_name], freq_features.get(stage_name),
                                           training, verify)
            stage_fused[stage_name] = fused
            if maps:
                attention[stage_name] = maps

        s_hat = None
        if self.use_mpsm:
            s_hat, _ = mpsm(stage_fused["low"], stage_fused["mid"], stage_fused["high"], self.k)
            head_in = dc.flatten(s_hat)
        else:
            head_in = dc.global_pool(stage_fused["high"])

        hidden = dc.relu(self.head_hidden(head_in))
        y_hat = dc.reshape(dc.sigmoid(self.head_out(hidden)), (x1.shape[0],))
        mask_hat = self._decode(stage_fused, x1.shape[1], x1.shape[2], training)
        return NetworkOutput(y_hat=y_hat, mask_hat=mask_hat, s_hat=s_hat, stage_fused=stage_fused,
                             attention=attention)

    __call__ = forward

    # ------------------------------------------------------------------
    def save(self, path: str, meta: Optional[Dict] = None):
        save_checkpoint(path, self.store.state_dict(), self.architecture(), meta)

    def load(self, path: str) -> Dict:
        """加载检查点，结构不一致时抛出 CheckpointError，返回头部"""
        tensors, header = load_checkpoint(path, expected_architecture=self.architecture())
        self.store.load_state_dict(tensors)
        return header

    @classmethod
    def from_checkpoint(cls, path: str) -> "TwoStreamNet":
        """按检查点头部重建网络并加载参数"""
        tensors, header = load_checkpoint(path)
        arch = header.get("architecture", {})
        try:
            net = cls(variant=arch["variant"], widths=arch["widths"], k=arch["k"], image_size=arch["image_size"])
        except KeyError as e:
            raise CheckpointError(f"检查点头部缺少结构字段: {e}")
        if net.architecture() != arch:
            raise CheckpointError(f"检查点结构与当前代码不一致: {arch}")
        net.store.load_state_dict(tensors)
        net.checkpoint_header = header
        return net
