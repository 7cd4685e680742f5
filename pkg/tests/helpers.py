# -*- coding: utf-8 -*-
"""
测试辅助函数：小尺寸模型、训练配置与有限差分梯度校验
"""

from core.config import validate_config
from core.diffusion import Denoiser, DenoiserParams, ModelConfig, build_noise_schedule

SMALL_MODEL = {"dim": 2, "hidden": 8, "prompt_embed_dim": 3, "view_embed_dim": 3, "num_prompts": 3}


def make_model(views: int = 2, steps: int = 2, seed: int = 0, **model_overrides) -> Denoiser:
    config = ModelConfig(**{**SMALL_MODEL, **model_overrides})
    params = DenoiserParams.initialize(config, views, steps, seed=seed)
    return Denoiser(params, build_noise_schedule(steps))


def tiny_config(**overrides):
    """几秒内跑完的训练配置"""
    data = {
        "views": 2,
        "steps": 2,
        "batch_size": 2,
        "epochs": 2,
        "pretrain_steps": 20,
        "pretrain_batch": 4,
        "num_eval_prompts": 2,
        "checkpoint_every": 1,
        "model": dict(SMALL_MODEL),
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return validate_config(data)


def numeric_gradient(loss_fn, arrays, name, index, h=1e-5):
    """对 arrays[name][index] 做中心差分"""
    original = arrays[name][index]
    arrays[name][index] = original + h
    plus = loss_fn()
    arrays[name][index] = original - h
    minus = loss_fn()
    arrays[name][index] = original
    return (plus - minus) / (2.0 * h)


def check_gradients(loss_fn, grads, arrays, rng, samples=12, h=1e-5, rtol=1e-4, atol=1e-7):
    """随机抽取参数分量，比较解析梯度与中心差分"""
    names = sorted(arrays)
    for _ in range(samples):
        name = names[int(rng.integers(len(names)))]
        index = tuple(int(rng.integers(s)) for s in arrays[name].shape)
        numeric = numeric_gradient(loss_fn, arrays, name, index, h)
        analytic = float(grads[name][index])
        assert abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric)), \
            f"{name}{index}: analytic={analytic}, numeric={numeric}"
