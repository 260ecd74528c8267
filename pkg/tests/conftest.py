import os
import sys

import numpy as np
import pytest

# 添加项目根目录到Python路径
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from data_processing.services import PlantedGenerator, PlantedSpec  # noqa: E402
from thc_core.services.thc_model import ThcModel  # noqa: E402


@pytest.fixture
def rng():
    """固定种子的随机数生成器"""
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    """V=24、两层 (6,3) 的小模型"""
    return ThcModel(24, [6, 3], heads=2, d_k=4, d_v=4, readout_hidden=8, seed=7)


@pytest.fixture
def tiny_spec():
    """V=12，4 个细社区、2 个粗社区"""
    return PlantedSpec(n_nodes=12, n_fine=4, n_coarse=2, within=0.8, between=0.2,
                       sigma=0.05, class_shift=0.3, effect_blocks=[0], n_samples=20, seed=3)


@pytest.fixture
def tiny_dataset(tiny_spec):
    """由 tiny_spec 生成的 20 个样本"""
    return PlantedGenerator(tiny_spec, workers=1).generate()
