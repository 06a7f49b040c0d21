#!/usr/bin/env python3
"""
训练目标与评估指标
L_total = L_ce + lambda1 * L_sim + lambda2 * L_seg，所有损失在批内取平均；
评估指标 ACC（阈值 0.5）、AUC、EER。
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from sklearn.metrics import roc_auc_score, roc_curve

from core import diffcore as dc
from core.diffcore import Tensor
from core.errors import ConfigError, DimensionError, UndefinedMetricError

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
DEFAULT_LAMBDA1 = 10.0
DEFAULT_LAMBDA2 = 1.0
ACC_THRESHOLD = 0.5


@dataclass
class LossBreakdown:
    l_ce: Tensor
    l_sim: Tensor
    l_seg: Tensor
    l_total: Tensor
    lambda1: float
    lambda2: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "l_ce": self.l_ce.item(),
            "l_sim": self.l_sim.item(),
            "l_seg": self.l_seg.item(),
            "l_total": self.l_total.item(),
        }


class EvalReport(BaseModel):
    """一次评估的结果，按 JSON 行写入指标日志"""

    acc: float = Field(ge=0.0, le=1.0)
    auc: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    eer: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    threshold: float = ACC_THRESHOLD
    n_samples: int = 0
    n_positive: int = 0
    n_negative: int = 0


def _binary_cross_entropy(prob: Tensor, target: np.ndarray) -> Tensor:
    prob = dc.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    target = np.asarray(target, dtype=np.float64)
    pos = dc.mul(target, dc.log(prob))
    neg = dc.mul(1.0 - target, dc.log(dc.sub(1.0, prob)))
    return dc.mul(dc.add(pos, neg), -1.0)


def loss_ce(y_hat, y) -> Tensor:
    """二元交叉熵，批内平均"""
    y_hat = dc.as_tensor(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise DimensionError(f"y_hat 与 y 形状不一致: {y_hat.shape} vs {y.shape}")
    return dc.mean(_binary_cross_entropy(y_hat, y))


def loss_sim(s_hat, s, valid: Optional[np.ndarray] = None) -> Tensor:
    """
    ||s - s_hat||_F，(N, P, P) 输入时批内平均

    valid: 长度 P 的布尔数组，只统计两端都是有效块的 (i, j)；完全由补零构成的块不参与
    """
    s_hat = dc.as_tensor(s_hat)
    s = dc.as_tensor(s)
    if s_hat.shape != s.shape:
        raise DimensionError(f"相似度矩阵形状不一致: {s_hat.shape} vs {s.shape}")
    if s_hat.ndim < 2:
        raise DimensionError(f"相似度矩阵至少二维，实际 {s_hat.shape}")
    diff = dc.sub(s, s_hat)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool).reshape(-1)
        if valid.shape[0] != s.shape[-1]:
            raise DimensionError(f"有效块数组长度 {valid.shape[0]} 与相似度矩阵 {s.shape} 不一致")
        diff = dc.mul(diff, np.outer(valid, valid).astype(np.float64))
    norms = dc.l2_norm(diff, axis=(-2, -1))
    return dc.mean(norms)


def loss_seg(mask_hat, mask, normalize: bool = True) -> Tensor:
    """
    逐像素二元交叉熵求和；normalize=True 时除以 H*W。批内平均
    """
    mask_hat = dc.as_tensor(mask_hat)
    mask = np.asarray(mask, dtype=np.float64)
    if mask_hat.shape != mask.shape:
        raise DimensionError(f"掩码形状不一致: {mask_hat.shape} vs {mask.shape}")
    if mask_hat.ndim < 2:
        raise DimensionError(f"掩码至少二维，实际 {mask_hat.shape}")
    per_pixel = _binary_cross_entropy(mask_hat, mask)
    per_sample = dc.tsum(per_pixel, axis=(-2, -1))
    if normalize:
        per_sample = dc.mul(per_sample, 1.0 / (mask.shape[-2] * mask.shape[-1]))
    return dc.mean(per_sample)


def loss_total(l_ce: Tensor, l_sim: Optional[Tensor], l_seg: Tensor,
               lambda1: float = DEFAULT_LAMBDA1, lambda2: float = DEFAULT_LAMBDA2) -> LossBreakdown:
    """加权求和；没有 MPSM 的变体传入 l_sim=None"""
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError(f"损失权重不能为负: lambda1={lambda1}, lambda2={lambda2}")
    l_ce, l_seg = dc.as_tensor(l_ce), dc.as_tensor(l_seg)
    l_sim = dc.as_tensor(0.0) if l_sim is None else dc.as_tensor(l_sim)
    total = dc.add(dc.add(l_ce, dc.mul(l_sim, lambda1)), dc.mul(l_seg, lambda2))
    return LossBreakdown(l_ce=l_ce, l_sim=l_sim, l_seg=l_seg, l_total=total, lambda1=lambda1, lambda2=lambda2)


def equal_error_rate(y_true: np.ndarray, y_score: np.ndarray) -> float:
    """ROC 上 FPR = FNR 的点，相邻阈值间线性插值"""
    fpr, tpr, _ = roc_curve(y_true, y_score, drop_intermediate=False)
    fnr = 1.0 - tpr
    gap = fnr - fpr
    crossing = int(np.argmax(gap <= 0))
    if crossing == 0:
        return float(fpr[0])
    g0, g1 = gap[crossing - 1], gap[crossing]
    t = g0 / (g0 - g1)
    return float(fpr[crossing - 1] + t * (fpr[crossing] - fpr[crossing - 1]))


def compute_metrics(y_score: Sequence[float], y_true: Sequence[int], threshold: float = ACC_THRESHOLD) -> EvalReport:
    """
    ACC/AUC/EER

    Raises:
        UndefinedMetricError: 只有一个类别；异常的 report 属性中仍带有 ACC
    """
    y_score = np.asarray(y_score, dtype=np.float64).reshape(-1)
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    if y_score.shape != y_true.shape or y_score.size == 0:
        raise DimensionError(f"分数与标签数量不一致或为空: {y_score.shape} vs {y_true.shape}")

    predictions = (y_score >= threshold).astype(np.int64)
    acc = float(np.mean(predictions == y_true))
    n_positive = int(np.sum(y_true == 1))
    n_negative = int(np.sum(y_true == 0))
    report = EvalReport(acc=acc, threshold=threshold, n_samples=int(y_true.size),
                        n_positive=n_positive, n_negative=n_negative)
    if n_positive == 0 or n_negative == 0:
        raise UndefinedMetricError("只有单一类别，AUC/EER 无定义", report=report)

    report.auc = float(roc_auc_score(y_true, y_score))
    report.eer = float(np.clip(equal_error_rate(y_true, y_score), 0.0, 1.0))
    return report


def metrics(scores: Sequence[Tuple[float, int]], threshold: float = ACC_THRESHOLD) -> EvalReport:
    """scores 为 (y_hat, y) 对的列表"""
    pairs = np.asarray(list(scores), dtype=np.float64).reshape(-1, 2)
    return compute_metrics(pairs[:, 0], pairs[:, 1].astype(np.int64), threshold)
