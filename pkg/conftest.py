#!/usr/bin/env python3
"""
pytest 公共配置
耗时较长的端到端测试标记为 slow，只有设置 FORGERY_DETECTOR_SLOW=1 时才运行
"""

import os

import numpy as np
import pytest

SLOW_ENV_VAR = "FORGERY_DETECTOR_SLOW"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 完整训练等耗时测试，需要 FORGERY_DETECTOR_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv(SLOW_ENV_VAR) == "1":
        return
    skip_slow = pytest.mark.skip(reason=f"设置 {SLOW_ENV_VAR}=1 运行耗时测试")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
