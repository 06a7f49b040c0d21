#!/usr/bin/env python3
"""
伪造检测项目的异常定义
"""


class ForgeryDetectorError(Exception):
    """项目内所有异常的基类"""


class DimensionError(ForgeryDetectorError, ValueError):
    """形状或尺寸不匹配"""


class ConfigError(ForgeryDetectorError, ValueError):
    """超参数或配置非法"""


class UsageError(ForgeryDetectorError):
    """接口使用错误，例如对非标量调用 backward"""


class CheckpointError(ForgeryDetectorError):
    """检查点格式错误或与网络结构不一致"""


class CorpusError(ForgeryDetectorError):
    """数据集清单非法或损坏样本过多"""


class TrainingError(ForgeryDetectorError):
    """训练过程中出现 NaN 损失或 NaN 梯度"""


class UndefinedMetricError(ForgeryDetectorError):
    """只有单一类别时 AUC/EER 无定义，report 中仍带有 ACC"""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
