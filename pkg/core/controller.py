# -*- coding: utf-8 -*-
"""
约束控制器模块
拉格朗日原始-对偶状态：批平均联合奖励、自适应步长的 λ 更新、
自定进度的 EMA 阈值 τ，以及固定 τ / 固定 α 的消融模式
"""

from typing import Dict, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.errors import CheckpointError, ContractError
from core.logger import get_logger
from core.objectives import TrajectoryPair

logger = get_logger("controller")


class ControllerConfig(BaseModel):
    """控制器配置"""

    model_config = ConfigDict(extra="forbid")

    alpha_plus: float = Field(0.1, gt=0.0)
    alpha_minus: float = Field(0.01, gt=0.0)
    beta_tau: float = Field(0.99, ge=0.0, lt=1.0)
    lambda_init: float = Field(0.0, ge=0.0)
    lambda_max: float = Field(5.0, gt=0.0)
    tau_mode: Literal["self-paced", "fixed"] = "self-paced"
    tau_fixed: float = 0.0
    alpha_mode: Literal["adaptive", "fixed"] = "adaptive"
    alpha_fixed: float = Field(0.1, gt=0.0)
    # algorithm: 以更新后的 τ_k 判定违约、以 τ_{k-1} 计算步长；equation: 两者都用 τ_k
    lambda_rule: Literal["algorithm", "equation"] = "algorithm"

    @model_validator(mode="after")
    def _check_steps(self):
        if self.alpha_mode == "adaptive" and self.alpha_plus < self.alpha_minus:
            raise ValueError("自适应模式要求 alpha_plus ≥ alpha_minus")
        if self.lambda_init > self.lambda_max:
            raise ValueError("lambda_init 不能超过 lambda_max")
        return self


class ConstraintState:
    """拉格朗日乘子 λ_k 与阈值 τ_k"""

    def __init__(self, config: ControllerConfig):
        self.config = config
        self.lam = config.lambda_init
        self.tau: Optional[float] = config.tau_fixed if config.tau_mode == "fixed" else None
        self.initialized = config.tau_mode == "fixed"

    def to_dict(self) -> Dict:
        return {"lambda": self.lam, "tau": self.tau, "initialized": self.initialized}

    def load_dict(self, data: Optional[Dict]):
        if not data:
            return
        try:
            self.lam = float(data["lambda"])
            self.tau = None if data["tau"] is None else float(data["tau"])
            self.initialized = bool(data["initialized"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"控制器状态损坏: {e}") from e

    def __repr__(self) -> str:
        return f"ConstraintState(lambda={self.lam}, tau={self.tau})"


def batch_avg_joint_reward(pairs: Sequence[TrajectoryPair]) -> float:
    """
    批平均联合奖励 (1/2B)·Σ_i (R_mv^{i,s} + R_mv^{i,z})，使用归一化奖励

    Args:
        pairs: B 个已评分的轨迹对

    Returns:
        float: 批平均
    """
    if not pairs:
        raise ContractError("批为空，无法计算平均联合奖励")
    total = 0.0
    for pair in pairs:
        s, z = pair.normalized_records()
        total += float(s.joint_norm) + float(z.joint_norm)
    return total / (2 * len(pairs))


def update_tau(state: ConstraintState, r_bar: float) -> float:
    """
    更新阈值：首次调用 τ ← r̄，之后 τ ← β_τ·τ + (1−β_τ)·r̄；固定模式返回固定值

    Returns:
        float: 新的 τ
    """
    config = state.config
    if config.tau_mode == "fixed":
        state.tau = config.tau_fixed
        return state.tau
    if not state.initialized or state.tau is None:
        state.tau = float(r_bar)
        state.initialized = True
        return state.tau
    state.tau = config.beta_tau * state.tau + (1.0 - config.beta_tau) * r_bar
    return state.tau


def step_size(config: ControllerConfig, violated: bool) -> float:
    if config.alpha_mode == "fixed":
        return config.alpha_fixed
    return config.alpha_plus if violated else config.alpha_minus


def update_lambda(state: ConstraintState, r_bar: float, tau_for_gate: float,
                  tau_for_magnitude: float) -> float:
    """
    对偶更新 λ ← clamp(λ + α·(τ − r̄), 0, λ_max)

    Args:
        state: 约束状态（原地更新）
        r_bar: 批平均联合奖励
        tau_for_gate: 判定是否违约（r̄ < τ）所用的阈值
        tau_for_magnitude: 计算步长所用的阈值

    Returns:
        float: 新的 λ
    """
    config = state.config
    alpha = step_size(config, r_bar < tau_for_gate)
    state.lam = min(max(state.lam + alpha * (tau_for_magnitude - r_bar), 0.0), config.lambda_max)
    return state.lam


class ConstraintController:
    """每个 epoch 调用一次：先更新 τ，再更新 λ"""

    def __init__(self, config: ControllerConfig):
        self.config = config
        self.state = ConstraintState(config)

    @property
    def lam(self) -> float:
        return self.state.lam

    @property
    def tau(self) -> Optional[float]:
        return self.state.tau

    def step(self, r_bar: float) -> Dict:
        """
        一次原始-对偶控制更新

        Args:
            r_bar: 批平均联合奖励

        Returns:
            Dict: {"lambda", "tau", "violated"}
        """
        previous = self.state.tau if self.state.initialized else r_bar
        tau = update_tau(self.state, r_bar)
        magnitude_tau = previous if self.config.lambda_rule == "algorithm" else tau
        violated = r_bar < tau
        lam = update_lambda(self.state, r_bar, tau, magnitude_tau)
        logger.debug(f"约束更新: r̄={r_bar:.5f}, τ={tau:.5f}, λ={lam:.5f}, 违约={violated}")
        return {"lambda": lam, "tau": tau, "violated": violated}

    def state_dict(self) -> Dict:
        return self.state.to_dict()

    def load_state_dict(self, data: Optional[Dict]):
        self.state.load_dict(data)
