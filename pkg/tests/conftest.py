#!/usr/bin/env python3
"""pytest 公共设置"""

import os
import sys

# 添加 src 目录到路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 端到端验收实验（pytest -m 'not slow' 跳过）")
