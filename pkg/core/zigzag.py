# -*- coding: utf-8 -*-
"""
之字形采样模块
去噪（高引导）→ 近似反演（低引导）→ 再去噪（高引导）的自我修正步，
以及按调度（首步 / 全步 / 显式步集合）应用它的多视角采样
"""

import math
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from core.diffusion import (
    Denoiser,
    GuidanceConfig,
    MultiviewTrajectory,
    StepResult,
    denoise_step,
    empty_trajectory,
    record_step,
)
from core.errors import ConfigError, ContractError
from core.logger import get_logger

logger = get_logger("zigzag")


class ZigzagSchedule(BaseModel):
    """之字形调度"""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["first-step", "full-step", "explicit"] = "first-step"
    steps: List[int] = Field(default_factory=list)
    passes_per_step: int = Field(1, ge=1)

    @field_validator("steps")
    @classmethod
    def _positive_steps(cls, value: List[int]) -> List[int]:
        if any(s < 1 for s in value):
            raise ValueError("显式步必须 ≥ 1")
        return sorted(set(value))

    def active_steps(self, total_steps: int) -> List[int]:
        """
        解析出在 [1, T] 内实际应用之字形的时间步（降序）

        Args:
            total_steps: 采样步数 T

        Returns:
            List[int]: 时间步列表
        """
        if self.mode == "first-step":
            return [total_steps]
        if self.mode == "full-step":
            return list(range(total_steps, 0, -1))
        outside = [s for s in self.steps if s > total_steps]
        if outside:
            raise ConfigError(f"显式步 {outside} 超出 [1, {total_steps}]", key="zigzag.steps")
        return sorted(self.steps, reverse=True)


def approximate_inversion(model: Denoiser, x_prev: np.ndarray, t: int, prompt: int,
                          omega_low: float = 1.0) -> np.ndarray:
    """
    近似反演：把 x_{t-1} 映射回 x̃_t

    在 x_prev 上以低引导预测 ε̂，得到预测干净样本
    f = (x_prev − √(1−ᾱ_{t-1})·ε̂)/√ᾱ_{t-1}，再返回 √ᾱ_t·f + √(1−ᾱ_t)·ε̂；
    沿用 ε_θ(x_prev) ≈ ε_θ(x̃_t) 的简化。

    Args:
        model: 噪声预测器
        x_prev: 去噪后的潜变量 [V, d]
        t: 反演目标时间步
        prompt: prompt 编号
        omega_low: 低引导系数

    Returns:
        np.ndarray: x̃_t
    """
    schedule = model.schedule
    schedule.check_step(t)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    eps = model.predict_noise(x_prev, t, prompt, omega_low)
    abar_prev = schedule.alphabar[t - 1]
    abar_t = schedule.alphabar[t]
    clean = (x_prev - math.sqrt(1.0 - abar_prev) * eps) / math.sqrt(abar_prev)
    return math.sqrt(abar_t) * clean + math.sqrt(1.0 - abar_t) * eps


def zigzag_pass(model: Denoiser, x_t: np.ndarray, t: int, prompt: int, omega_high: float,
                omega_low: float, rng: np.random.Generator, eta: float = 1.0,
                passes: int = 1, scratch: Optional[np.random.Generator] = None) -> StepResult:
    """
    一次之字形自我修正步

    Args:
        model: 噪声预测器
        x_t: 当前潜变量 [V, d]
        t: 时间步
        prompt: prompt 编号
        omega_high: 去噪引导系数
        omega_low: 反演引导系数
        rng: 随机数生成器，只供最后一次再去噪使用
        eta: 采样噪声系数
        passes: 反演 + 再去噪的重复次数
        scratch: 中间去噪的随机数来源，默认取 rng 跳跃后的独立流

    Returns:
        StepResult: 最后一次再去噪的结果（记录的 μ、σ 来自这一次）
    """
    if passes < 1:
        raise ContractError("passes 必须至少为 1")
    if scratch is None:
        scratch = scratch_generator(rng)
    result = denoise_step(model, x_t, t, prompt, omega_high, scratch, eta)
    for i in range(passes):
        x_tilde = approximate_inversion(model, result.x_prev, t, prompt, omega_low)
        source = rng if i == passes - 1 else scratch
        result = denoise_step(model, x_tilde, t, prompt, omega_high, source, eta)
    return result


def scratch_generator(rng: np.random.Generator) -> np.random.Generator:
    """由 rng 跳跃得到的独立流，不消耗 rng 本身"""
    return np.random.Generator(rng.bit_generator.jumped())


def zmv_sample(model: Denoiser, prompt: int, num_views: int, schedule: ZigzagSchedule,
               guidance: GuidanceConfig, rng: np.random.Generator, seed: Optional[int] = None,
               eta: float = 1.0) -> MultiviewTrajectory:
    """
    之字形多视角采样（ZMV）

    主随机数流的消耗与标准采样逐一对应：之字形步的中间去噪改从跳跃流取噪声，
    同一种子下两种采样共享 x_T 与每一步最终使用的噪声（共同随机数）。
    记录的 (μ, σ) 与条件潜变量 x̃_t 取自最终再去噪，似然重放据此按标准链处理。

    Args:
        model: 噪声预测器
        prompt: prompt 编号
        num_views: 视角数
        schedule: 之字形调度
        guidance: 高低引导系数
        rng: 该轨迹独立的随机数生成器
        seed: 记录在轨迹中的种子
        eta: 采样噪声系数

    Returns:
        MultiviewTrajectory: 标记为 zigzag 的轨迹
    """
    if num_views < 1:
        raise ContractError("视角数必须至少为 1")
    noise_schedule = model.schedule
    active = set(schedule.active_steps(noise_schedule.steps))
    trajectory = empty_trajectory(prompt, num_views, noise_schedule, model.params.dim, "zigzag", seed)
    trajectory.zigzag_steps = tuple(sorted(active, reverse=True))
    trajectory.latents[noise_schedule.steps] = rng.standard_normal((num_views, model.params.dim))
    scratch = scratch_generator(rng)

    for t in range(noise_schedule.steps, 0, -1):
        x_t = trajectory.latents[t]
        if t in active:
            result = zigzag_pass(model, x_t, t, prompt, guidance.omega_high, guidance.omega_low, rng,
                                 eta, schedule.passes_per_step, scratch)
        else:
            result = denoise_step(model, x_t, t, prompt, guidance.omega_high, rng, eta)
        record_step(trajectory, t, guidance.omega_high, result)
    logger.debug(f"ZMV 采样完成: prompt={prompt}, 之字形步={trajectory.zigzag_steps}")
    return trajectory


def expected_predictions(total_steps: int, schedule: ZigzagSchedule) -> int:
    """一条 ZMV 轨迹的引导预测次数：T + 2·passes·|steps|"""
    return total_steps + 2 * schedule.passes_per_step * len(schedule.active_steps(total_steps))
