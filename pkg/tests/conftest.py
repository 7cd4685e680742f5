# -*- coding: utf-8 -*-
"""
测试公共夹具
"""

import numpy as np
import pytest

from core.diffusion import ModelConfig
from core.logger import configure_logging
from core.scene import make_scenes
from tests.helpers import SMALL_MODEL, make_model


@pytest.fixture(autouse=True)
def console_only_logging():
    yield
    configure_logging(None)


@pytest.fixture
def small_model_config():
    return ModelConfig(**SMALL_MODEL)


@pytest.fixture
def model():
    """T = 2, V = 2, d = 2 的随机初始化去噪网络"""
    return make_model()


@pytest.fixture
def scenes():
    return make_scenes(SMALL_MODEL["num_prompts"], 2, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
