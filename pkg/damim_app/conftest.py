import os
import sys

import numpy as np
import pytest

# 添加应用目录到Python路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from modules import SyntheticSpec, TrainConfig, build_config, generate_synthetic  # noqa: E402
from modules import tensor_core as tc  # noqa: E402

# 测试用的小模型：16×16 图像，P=4 → N=16，L=2，d=16
TINY_MODEL = dict(depth=2, dim=16, heads=2, patch_size=4, image_size=16, channels=3)


@pytest.fixture
def float64():
    """梯度相关测试使用 64 位模式"""
    with tc.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_domains():
    return generate_synthetic(SyntheticSpec(image_size=16, per_class=8), seed=5)


@pytest.fixture
def tiny_config():
    def make(**overrides) -> TrainConfig:
        fields = dict(TINY_MODEL, steps=3, batch_size=4, log_every=1)
        fields.update(overrides)
        return build_config(TrainConfig, **fields)
    return make
