# -*- coding: utf-8 -*-
"""
优化器模块
在命名数组字典上实现解耦权重衰减的 Adam（AdamW）与全局范数梯度裁剪
"""

import math
from typing import Dict, Optional, Tuple

import numpy as np

from core.errors import CheckpointError, TrainingError

ArrayMap = Dict[str, np.ndarray]


def global_norm(grads: ArrayMap) -> float:
    """所有梯度拼接后的 L2 范数（按名称排序累加，保证结果确定）"""
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(grads[name] * grads[name]))
    return math.sqrt(total)


def clip_grad_norm(grads: ArrayMap, max_norm: float) -> Tuple[ArrayMap, float]:
    """
    按全局范数裁剪梯度

    Args:
        grads: 参数名 -> 梯度
        max_norm: 全局范数上限

    Returns:
        Tuple[ArrayMap, float]: (裁剪后的新梯度, 裁剪前的全局范数)
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise TrainingError(f"梯度范数非有限: {norm}")
    if norm <= max_norm or norm == 0.0:
        return {name: g.copy() for name, g in grads.items()}, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


class AdamW:
    """解耦权重衰减的自适应矩估计优化器"""

    def __init__(self, learning_rate: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.first_moment: ArrayMap = {}
        self.second_moment: ArrayMap = {}

    def step(self, params: ArrayMap, grads: ArrayMap):
        """
        原地更新参数

        Args:
            params: 参数名 -> 数组（原地修改）
            grads: 参数名 -> 同形状梯度，缺失的参数不更新
        """
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count

        for name in sorted(grads):
            grad = grads[name]
            param = params[name]
            m = self.first_moment.get(name)
            v = self.second_moment.get(name)
            if m is None:
                m = np.zeros_like(param)
                v = np.zeros_like(param)

            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.first_moment[name] = m
            self.second_moment[name] = v

            if self.weight_decay:
                param *= 1.0 - self.learning_rate * self.weight_decay
            param -= self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_dict(self) -> Dict:
        return {
            "step_count": self.step_count,
            "first_moment": {k: v.copy() for k, v in self.first_moment.items()},
            "second_moment": {k: v.copy() for k, v in self.second_moment.items()},
        }

    def load_state_dict(self, state: Optional[Dict]):
        if not state:
            return
        try:
            self.step_count = int(state["step_count"])
            self.first_moment = {k: np.array(v, dtype=np.float64) for k, v in state["first_moment"].items()}
            self.second_moment = {k: np.array(v, dtype=np.float64) for k, v in state["second_moment"].items()}
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"优化器状态损坏: {e}") from e
